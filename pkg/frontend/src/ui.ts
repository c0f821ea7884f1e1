/** DOM rendering: six vital tiles, acoustic controls, developer panel.
 * Pure view over DashboardState; all mutations flow through commands. */

import { formatVital, VITAL_LABELS, VITAL_UNITS, VITALS, VitalName } from "./protocol.js";
import { SignalRing } from "./ring.js";
import { DashboardState, isStale } from "./state.js";

export interface Controls {
  setAudioMode(mode: string): void;
  measureBp(): void;
  toggleSensor(peripheral: string, on: boolean): void;
  setRate(peripheral: string, hz: number): void;
  setLed(ma: number): void;
}

const SENSORS = ["ppg", "imu9", "temp"];
const RATES: Record<string, number[]> = { ppg: [25, 50, 100, 200], imu9: [25, 50, 100, 200], temp: [8, 16, 32] };

export function buildDom(root: HTMLElement, controls: Controls): void {
  root.innerHTML = `
    <header>
      <h1>budsim console</h1>
      <span id="conn" class="badge">disconnected</span>
      <span id="scenario"></span>
    </header>
    <section class="tiles">
      ${VITALS.map((v) => `
        <article class="tile" id="tile-${v}">
          <h2>${VITAL_LABELS[v]}</h2>
          <div class="value">—</div>
          <div class="unit">${VITAL_UNITS[v]}</div>
          ${v === "bp" ? '<button id="bp-measure">measure</button>' : ""}
        </article>`).join("")}
    </section>
    <section class="audio">
      <span>audio:</span>
      <button data-mode="off">off</button>
      <button data-mode="anc">ANC</button>
      <button data-mode="passthrough">pass-through</button>
      <span id="audio-mode" class="badge">off</span>
    </section>
    <details class="devmode" open>
      <summary>Developer mode</summary>
      <div id="sensors"></div>
      <label>LED current <input type="range" id="led" min="1" max="60" value="5">
        <span id="led-value">5 mA</span></label>
      <div id="error" class="error"></div>
      <canvas id="plot" width="640" height="160"></canvas>
    </details>`;

  const sensors = root.querySelector("#sensors")!;
  for (const s of SENSORS) {
    const row = document.createElement("div");
    row.innerHTML = `
      <label><input type="checkbox" data-sensor="${s}"> ${s}</label>
      <select data-rate="${s}">${RATES[s].map((r) => `<option>${r}</option>`).join("")}</select>`;
    sensors.appendChild(row);
  }

  root.querySelectorAll<HTMLButtonElement>("[data-mode]").forEach((btn) =>
    btn.addEventListener("click", () => controls.setAudioMode(btn.dataset.mode!)));
  root.querySelector("#bp-measure")?.addEventListener("click", () => controls.measureBp());
  root.querySelectorAll<HTMLInputElement>("[data-sensor]").forEach((box) =>
    box.addEventListener("change", () => controls.toggleSensor(box.dataset.sensor!, box.checked)));
  root.querySelectorAll<HTMLSelectElement>("[data-rate]").forEach((sel) =>
    sel.addEventListener("change", () => controls.setRate(sel.dataset.rate!, Number(sel.value))));
  const led = root.querySelector<HTMLInputElement>("#led")!;
  led.addEventListener("change", () => controls.setLed(Number(led.value)));
}

export function render(root: HTMLElement, state: DashboardState): void {
  const conn = root.querySelector("#conn")!;
  conn.textContent = state.connected ? "connected" : "disconnected";
  conn.className = `badge ${state.connected ? "ok" : "bad"}`;
  root.querySelector("#scenario")!.textContent = state.scenario;

  for (const name of VITALS) {
    const tile = root.querySelector(`#tile-${name}`)!;
    const stale = !state.connected || isStale(state.tiles[name], state.latestTUs);
    tile.classList.toggle("stale", stale);
    tile.querySelector(".value")!.textContent = formatVital(name as VitalName,
                                                            state.tiles[name].values);
  }
  const measure = root.querySelector<HTMLButtonElement>("#bp-measure");
  if (measure) {
    measure.disabled = state.bpMeasuring;
    measure.textContent = state.bpMeasuring ? "measuring…" : "measure";
  }
  root.querySelector("#audio-mode")!.textContent = state.audioMode;
  for (const s of SENSORS) {
    const box = root.querySelector<HTMLInputElement>(`[data-sensor="${s}"]`);
    if (box) box.checked = Boolean(state.recording[s]);
    const sel = root.querySelector<HTMLSelectElement>(`[data-rate="${s}"]`);
    if (sel && state.sensorRates[s]) sel.value = String(state.sensorRates[s]);
  }
  const led = root.querySelector<HTMLInputElement>("#led")!;
  led.value = String(state.ledCurrentMa);
  root.querySelector("#led-value")!.textContent = `${state.ledCurrentMa} mA`;
  const error = root.querySelector("#error")!;
  error.textContent = state.lastError
    ? `${state.lastError.cmd || "command"}: ${state.lastError.err_name}` : "";
}

export function drawPlot(canvas: HTMLCanvasElement, ring: SignalRing): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const points = ring.snapshot();
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (points.length < 2) return;
  const t1 = points[points.length - 1].t_us;
  const t0 = t1 - ring.windowUs;
  let lo = Infinity, hi = -Infinity;
  for (const p of points) {
    lo = Math.min(lo, p.value);
    hi = Math.max(hi, p.value);
  }
  const span = hi - lo || 1;
  ctx.strokeStyle = "#2a7";
  ctx.beginPath();
  points.forEach((p, i) => {
    const x = ((p.t_us - t0) / ring.windowUs) * canvas.width;
    const y = canvas.height - ((p.value - lo) / span) * (canvas.height - 8) - 4;
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
}
