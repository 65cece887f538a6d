// View state: pad grid, piano roll, surprise meter. Pure data + reducers,
// no DOM; app.ts renders from here.

import type { EventBody, RankingFrame, SurpriseFrame } from "./protocol.js";

export const GRID_ROWS = 8;
export const GRID_COLS = 16;
export const GRID_SIZE = GRID_ROWS * GRID_COLS; // one pad per pitch

export type Pad = {
  rank: number;
  pitch: number;
  logProb: number | null;
  color: string;
};

const NEUTRAL = "#555566";

/** Likelihood color ramp, cyan (rank 0) to magenta (last). */
export function rampColor(t: number): string {
  const x = Math.min(1, Math.max(0, t));
  const r = Math.round(255 * x);
  const g = Math.round(255 * (1 - x));
  return `rgb(${r},${g},255)`;
}

/** Pitch-ordered pads, no likelihood info yet. */
export function initialGrid(): Pad[] {
  return Array.from({ length: GRID_SIZE }, (_, i) =>
    ({ rank: i, pitch: i, logProb: null, color: NEUTRAL }));
}

/**
 * Re-rank the grid from a ranking frame: pad at rank k shows the k-th
 * most likely pitch, colored along the ramp. Color is a monotone
 * function of log-prob because the server sends the list best-first.
 */
export function applyRanking(frame: RankingFrame): Pad[] {
  const n = frame.ranking.length;
  return frame.ranking.map(([pitch, logProb], i) => ({
    rank: i,
    pitch,
    logProb,
    color: rampColor(n > 1 ? i / (n - 1) : 0),
  }));
}

// -- piano roll ---------------------------------------------------------------

export type RollNote = {
  instrument: number;
  pitch: number;
  onset: number;           // seconds of musical time
  duration: number | null; // null while sounding
  source: "player" | "model";
};

/** Accumulates event frames into paired notes on a musical-time axis. */
export class Roll {
  notes: RollNote[] = [];
  now = 0;

  /** Event deltas advance musical time; velocity < 0.5 is a note-off. */
  append(e: EventBody, source: "player" | "model"): void {
    this.now += Math.max(0, e.time);
    if (e.velocity >= 0.5) {
      this.notes.push({ instrument: e.instrument, pitch: e.pitch,
                        onset: this.now, duration: null, source });
      return;
    }
    // close the oldest open note of this voice; stray offs are ignored
    for (const n of this.notes) {
      if (n.duration === null && n.instrument === e.instrument && n.pitch === e.pitch) {
        n.duration = this.now - n.onset;
        return;
      }
    }
  }

  /** Close everything, e.g. on disconnect; leaves no stuck notes. */
  closeAll(): void {
    for (const n of this.notes) {
      if (n.duration === null) n.duration = this.now - n.onset;
    }
  }

  openCount(): number {
    return this.notes.reduce((k, n) => k + (n.duration === null ? 1 : 0), 0);
  }

  /** Notes intersecting the trailing window, for rendering. */
  window(seconds: number): RollNote[] {
    const lo = this.now - seconds;
    return this.notes.filter(
      n => (n.duration === null ? this.now : n.onset + n.duration) >= lo);
  }

  clear(): void {
    this.notes = [];
    this.now = 0;
  }
}

// -- local timing ---------------------------------------------------------------

/** Measures the time delta attached to outbound feeds. */
export class DeltaClock {
  private lastMs: number | null = null;

  /** Seconds since the previous call, clamped to the model's 10s ceiling. */
  measure(nowMs: number): number {
    const dt = this.lastMs === null ? 0 : (nowMs - this.lastMs) / 1000;
    this.lastMs = nowMs;
    return Math.min(10, Math.max(0, dt));
  }

  reset(): void {
    this.lastMs = null;
  }
}

/**
 * Remembers which pitch a pad was bound to when it was pressed, so the
 * note-off matches even if a ranking re-binds the pad mid-hold.
 */
export class PressTracker {
  private held = new Map<number, number>();

  press(padIndex: number, pitch: number): void {
    this.held.set(padIndex, pitch);
  }

  /** Returns the pitch to release, or null for an unpressed pad. */
  release(padIndex: number): number | null {
    const pitch = this.held.get(padIndex);
    if (pitch === undefined) return null;
    this.held.delete(padIndex);
    return pitch;
  }

  /** Pitches still held, for emergency note-offs on disconnect. */
  drain(): number[] {
    const out = [...this.held.values()];
    this.held.clear();
    return out;
  }
}

// -- surprise meter ---------------------------------------------------------------

export class SurpriseMeter {
  history: number[] = [];
  last: SurpriseFrame["nll"] | null = null;
  capacity = 64;

  push(nll: SurpriseFrame["nll"]): void {
    this.last = nll;
    this.history.push(nll.total);
    if (this.history.length > this.capacity) this.history.shift();
  }

  clear(): void {
    this.history = [];
    this.last = null;
  }
}
