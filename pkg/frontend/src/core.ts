// The single dispatcher between the socket and the view state. All
// mutation funnels through one AppCore instance on the UI event loop;
// rendering reads from it and never writes.

import {
  feedFrame, modeFrame, parseServerFrame, rankingRequestFrame, resetFrame,
  samplePitchFrame, SeqGate, type Mode,
} from "./protocol.js";
import {
  applyRanking, DeltaClock, initialGrid, PressTracker, Roll, SurpriseMeter,
  type Pad,
} from "./state.js";

export type Status = "connecting" | "connected" | "disconnected";

const ON_VELOCITY_MIN = 1; // sub-0.5 velocities would read as note-offs

export class AppCore {
  grid: Pad[] = initialGrid();
  roll = new Roll();
  meter = new SurpriseMeter();
  gate = new SeqGate();
  status: Status = "connecting";
  mode: Mode = "raw";
  instrument = 1;
  malformed = 0;
  lastError: string | null = null;
  onchange: () => void = () => {};

  private clock = new DeltaClock();
  private presses = new PressTracker();

  constructor(private send: (text: string) => void,
              private now: () => number = () => performance.now()) {}

  // -- user input ------------------------------------------------------------

  /** Rank pad down: feed the pad's pitch with measured delta. */
  padDown(index: number, pressure = 0.75): void {
    const pad = this.grid[index];
    if (!pad || this.status !== "connected") return;
    const velocity = Math.max(ON_VELOCITY_MIN, Math.round(127 * pressure));
    this.send(feedFrame(this.instrument, pad.pitch,
                        this.clock.measure(this.now()), velocity));
    this.presses.press(index, pad.pitch);
  }

  /** Rank pad up: note-off for the pitch bound at press time. */
  padUp(index: number): void {
    const pitch = this.presses.release(index);
    if (pitch === null || this.status !== "connected") return;
    this.send(feedFrame(this.instrument, pitch,
                        this.clock.measure(this.now()), 0));
  }

  /** White pad: let the model choose the pitch. */
  samplePad(pressure = 0.75): void {
    if (this.status !== "connected") return;
    const velocity = Math.max(ON_VELOCITY_MIN, Math.round(127 * pressure));
    this.send(samplePitchFrame(this.instrument,
                               this.clock.measure(this.now()), velocity));
  }

  /** Yellow pad: reset the engine and clear local views. */
  resetPad(): void {
    if (this.status !== "connected") return;
    this.send(resetFrame());
    this.roll.clear();
    this.meter.clear();
    this.clock.reset();
  }

  setMode(mode: Mode): void {
    if (this.status !== "connected") return;
    const options: Record<string, unknown> = {};
    if (mode === "harmonize") {
      options.voices = 2;
    } else if (mode === "improvise" || mode === "generate") {
      options.reserved = [this.instrument];
    }
    this.send(modeFrame(mode, options));
    this.mode = mode;
  }

  /** Hardware MIDI input forwards as a feed, sharing the local clock. */
  midiNote(pitch: number, velocity: number): void {
    if (this.status !== "connected") return;
    this.send(feedFrame(this.instrument, pitch,
                        this.clock.measure(this.now()), velocity));
  }

  // -- socket lifecycle --------------------------------------------------------

  connected(): void {
    this.status = "connected";
    this.gate.reset();
    this.clock.reset();
    this.requestRanking();
    this.onchange();
  }

  disconnected(): void {
    // release anything held so no UI-originated note stays stuck
    for (const pitch of this.presses.drain()) {
      this.send(feedFrame(this.instrument, pitch, 0, 0));
    }
    this.status = "disconnected";
    this.roll.closeAll();
    this.onchange();
  }

  // -- inbound frames ------------------------------------------------------------

  handleMessage(raw: string): void {
    const frame = parseServerFrame(raw);
    if (frame === null) {
      this.malformed += 1;
      this.onchange();
      return;
    }
    if (!this.gate.admit(frame)) return;
    switch (frame.type) {
      case "event":
        this.roll.append(frame.event, frame.source);
        // grid stays honest: re-rank after every event
        this.requestRanking();
        break;
      case "ranking":
        this.grid = applyRanking(frame);
        break;
      case "surprise":
        this.meter.push(frame.nll);
        break;
      case "ack":
        if (frame.of === "reset") this.requestRanking();
        break;
      case "error":
        this.lastError = frame.error;
        break;
    }
    this.onchange();
  }

  private requestRanking(): void {
    this.send(rankingRequestFrame(this.instrument, 0.0, 96));
  }
}
