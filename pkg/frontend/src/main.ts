import { GatewayClient } from "./socket.js";
import { SignalRing } from "./ring.js";
import { DashboardState, initialState, markDisconnected, reduce } from "./state.js";
import { buildDom, drawPlot, render } from "./ui.js";

const url = new URLSearchParams(location.search).get("gateway")
  ?? `ws://${location.hostname || "127.0.0.1"}:8765`;

const root = document.getElementById("app")!;
let state: DashboardState = initialState();
const ring = new SignalRing();

const client = new GatewayClient(url, (u) => new WebSocket(u) as never);

buildDom(root, {
  setAudioMode: (mode) => client.sendCommand({ cmd: "set_audio_mode", args: { mode } }),
  measureBp: () => client.sendCommand({ cmd: "start_bp_measurement", args: {} }),
  toggleSensor: (peripheral, on) =>
    client.sendCommand({ cmd: "toggle_sensor", args: { peripheral, on } }),
  setRate: (peripheral, hz) =>
    client.sendCommand({ cmd: "set_sampling_rate", args: { peripheral, hz } }),
  setLed: (ma) => client.sendCommand({ cmd: "set_led_current", args: { ma } }),
});

client.onMessage = (message) => {
  state = reduce(state, message, client.pending);
  render(root, state);
};
client.onDisconnect = () => {
  state = markDisconnected(state);
  render(root, state);
};
client.connect();
render(root, state);

setInterval(() => {
  drawPlot(document.getElementById("plot") as HTMLCanvasElement, ring);
}, 250);
