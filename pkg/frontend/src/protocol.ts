// WebSocket wire protocol for the ncrd service.
//
// Server frames are JSON objects carrying a per-connection monotonic
// "seq"; anything that arrives out of order is stale (the bridge can
// re-deliver after a hiccup) and must be dropped, not reordered.

export type EventBody = {
  instrument: number;
  pitch: number;
  time: number;
  velocity: number;
};

export type EventFrame = {
  type: "event";
  seq: number;
  source: "player" | "model";
  event: EventBody;
};

export type RankingFrame = {
  type: "ranking";
  seq: number;
  ranking: [number, number][]; // [pitch, logProb], best first
};

export type SurpriseFrame = {
  type: "surprise";
  seq: number;
  nll: { instrument: number; pitch: number; time: number; velocity: number; total: number };
};

export type AckFrame = { type: "ack"; seq: number; of: string };
export type ErrorFrame = { type: "error"; seq: number; error: string };

export type ServerFrame =
  | EventFrame
  | RankingFrame
  | SurpriseFrame
  | AckFrame
  | ErrorFrame;

export type Mode =
  | "raw"
  | "autopitch"
  | "harmonize"
  | "improvise"
  | "generate"
  | "surprise";

export const MODES: Mode[] = [
  "raw", "autopitch", "harmonize", "improvise", "generate", "surprise",
];

// -- outbound ---------------------------------------------------------------

export function feedFrame(instrument: number, pitch: number, time: number,
                          velocity: number): string {
  return JSON.stringify({ type: "feed", instrument, pitch, time, velocity });
}

/** Query with pitch left to the model; other sub-values pinned. */
export function samplePitchFrame(instrument: number, time: number,
                                 velocity: number): string {
  return JSON.stringify({ type: "query", instrument, time, velocity });
}

export function rankingRequestFrame(instrument: number, time: number,
                                    velocity: number, topK = 128): string {
  return JSON.stringify({
    type: "ranking", instrument, time, velocity, top_k: topK,
  });
}

export function resetFrame(): string {
  return JSON.stringify({ type: "reset" });
}

export function modeFrame(mode: Mode, options: Record<string, unknown> = {}): string {
  return JSON.stringify({ type: "mode", mode, ...options });
}

// -- inbound ----------------------------------------------------------------

function isEventBody(x: any): x is EventBody {
  return x && typeof x === "object"
    && typeof x.instrument === "number" && typeof x.pitch === "number"
    && typeof x.time === "number" && typeof x.velocity === "number";
}

/** Parse one server frame; returns null on anything malformed. */
export function parseServerFrame(raw: string): ServerFrame | null {
  let msg: any;
  try {
    msg = JSON.parse(raw);
  } catch {
    return null;
  }
  if (!msg || typeof msg !== "object" || typeof msg.seq !== "number") return null;
  switch (msg.type) {
    case "event":
      if ((msg.source === "player" || msg.source === "model") && isEventBody(msg.event)) {
        return msg as EventFrame;
      }
      return null;
    case "ranking":
      if (Array.isArray(msg.ranking) && msg.ranking.every(
        (r: any) => Array.isArray(r) && r.length === 2
          && typeof r[0] === "number" && typeof r[1] === "number")) {
        return msg as RankingFrame;
      }
      return null;
    case "surprise":
      if (msg.nll && typeof msg.nll.total === "number") return msg as SurpriseFrame;
      return null;
    case "ack":
      if (typeof msg.of === "string") return msg as AckFrame;
      return null;
    case "error":
      if (typeof msg.error === "string") return msg as ErrorFrame;
      return null;
    default:
      return null;
  }
}

/** Drops frames whose sequence number does not advance. */
export class SeqGate {
  private last = 0;
  dropped = 0;

  /** True when the frame is fresh; stale frames bump the counter. */
  admit(frame: ServerFrame): boolean {
    if (frame.seq <= this.last) {
      this.dropped += 1;
      return false;
    }
    this.last = frame.seq;
    return true;
  }

  reset(): void {
    this.last = 0;
    this.dropped = 0;
  }
}
