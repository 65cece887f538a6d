// DOM bootstrap: renders AppCore state and wires pointer/socket events.

import { AppCore } from "./core.js";
import { MODES, type Mode } from "./protocol.js";
import { GRID_COLS, GRID_SIZE } from "./state.js";
import { initMidi } from "./midi.js";

const WS_URL = `ws://${location.hostname}:8765`;
const ROLL_SECONDS = 12;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, cls?: string, parent?: HTMLElement): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  if (parent) parent.appendChild(node);
  return node;
}

function main(): void {
  const root = document.getElementById("app")!;
  const status = el("div", "status", root);
  const controls = el("div", "controls", root);
  const gridBox = el("div", "grid", root);
  gridBox.style.gridTemplateColumns = `repeat(${GRID_COLS}, 1fr)`;
  const meterBox = el("div", "meter", root);
  const canvas = el("canvas", "roll", root);
  canvas.width = 960;
  canvas.height = 320;

  let socket: WebSocket | null = null;
  const core = new AppCore(text => {
    if (socket && socket.readyState === WebSocket.OPEN) socket.send(text);
  });

  // mode buttons + instrument picker
  const instrument = el("input", "instrument", controls);
  instrument.type = "number";
  instrument.min = "1";
  instrument.max = "272";
  instrument.value = "1";
  instrument.title = "instrument id";
  instrument.onchange = () => {
    core.instrument = Math.min(272, Math.max(1, Number(instrument.value) || 1));
  };
  for (const mode of MODES) {
    const b = el("button", "mode", controls);
    b.textContent = mode;
    b.onclick = () => {
      core.setMode(mode as Mode);
      render();
    };
  }

  // 128 rank pads + the two special pads
  const pads: HTMLButtonElement[] = [];
  for (let i = 0; i < GRID_SIZE; i++) {
    const pad = el("button", "pad", gridBox);
    pad.onpointerdown = e => core.padDown(i, e.pressure || 0.75);
    pad.onpointerup = () => core.padUp(i);
    pad.onpointerleave = () => core.padUp(i);
    pads.push(pad);
  }
  const sample = el("button", "pad special sample", gridBox);
  sample.textContent = "sample";
  sample.onpointerdown = e => core.samplePad(e.pressure || 0.75);
  const reset = el("button", "pad special reset", gridBox);
  reset.textContent = "reset";
  reset.onpointerdown = () => core.resetPad();

  function render(): void {
    status.textContent = `${core.status} | mode ${core.mode}`
      + (core.gate.dropped ? ` | dropped ${core.gate.dropped}` : "")
      + (core.lastError ? ` | ${core.lastError}` : "");
    status.dataset.state = core.status;
    for (let i = 0; i < GRID_SIZE; i++) {
      const pad = core.grid[i];
      pads[i].style.background = pad ? pad.color : "#333";
      pads[i].title = pad ? `pitch ${pad.pitch}` : "";
    }
    const nll = core.meter.last;
    meterBox.textContent = nll
      ? `surprise ${nll.total.toFixed(2)} nats`
      : "surprise -";
    drawRoll();
  }

  function drawRoll(): void {
    const ctx = canvas.getContext("2d")!;
    ctx.fillStyle = "#111118";
    ctx.fillRect(0, 0, canvas.width, canvas.height);
    const t1 = core.roll.now;
    const t0 = t1 - ROLL_SECONDS;
    for (const n of core.roll.window(ROLL_SECONDS)) {
      const end = n.duration === null ? t1 : n.onset + n.duration;
      const x = ((n.onset - t0) / ROLL_SECONDS) * canvas.width;
      const w = Math.max(2, ((end - n.onset) / ROLL_SECONDS) * canvas.width);
      const y = canvas.height - ((n.pitch + 1) / 128) * canvas.height;
      ctx.fillStyle = n.source === "player" ? "#4ec9b0" : "#c586c0";
      ctx.fillRect(x, y, w, Math.max(2, canvas.height / 128));
    }
  }

  core.onchange = render;

  function connect(): void {
    socket = new WebSocket(WS_URL);
    socket.onopen = () => core.connected();
    socket.onmessage = e => core.handleMessage(String(e.data));
    socket.onclose = () => {
      core.disconnected();
      setTimeout(connect, 1000); // keep trying; the server may come back
    };
  }
  connect();

  initMidi((pitch, velocity) => core.midiNote(pitch, velocity))
    .then(ok => {
      if (!ok) console.info("WebMIDI unavailable; on-screen pads only");
    });

  render();
}

main();
