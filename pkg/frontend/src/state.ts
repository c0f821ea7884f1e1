/** Dashboard state and its reducer.
 *
 * The console is stateless with respect to truth: every displayed value comes
 * from a gateway stream message, every control value from an acknowledged
 * CONFIG response. Replaying the same message sequence reproduces the same
 * state, which the tests rely on.
 */

import {
  AckPayload,
  GatewayMessage,
  StreamPayload,
  VITALS,
  VitalName,
  VitalStream,
} from "./protocol.js";

export const STALE_AFTER_US = 10_000_000;

export interface Tile {
  values: number[];
  t_us: number | null; // virtual time of the latest sample
}

export interface PendingCommand {
  seq: number;
  cmd: string;
  args: Record<string, unknown>;
  sentAt: number;
}

export interface DashboardState {
  connected: boolean;
  scenario: string;
  tiles: Record<VitalName, Tile>;
  latestTUs: number; // stream clock: newest virtual timestamp seen
  audioMode: "off" | "anc" | "passthrough";
  recording: Record<string, boolean>;
  sensorRates: Record<string, number>;
  ledCurrentMa: number;
  lastError: { cmd: string; err_name: string } | null;
  bpMeasuring: boolean;
  plotRates: Record<string, number>;
  history: { t_us: number; vital: string; value: number }[];
}

export function initialState(): DashboardState {
  const tiles = {} as Record<VitalName, Tile>;
  for (const name of VITALS) tiles[name] = { values: [], t_us: null };
  return {
    connected: false,
    scenario: "",
    tiles,
    latestTUs: 0,
    audioMode: "off",
    recording: {},
    sensorRates: {},
    ledCurrentMa: 5,
    lastError: null,
    bpMeasuring: false,
    plotRates: {},
    history: [],
  };
}

export function isStale(tile: Tile, latestTUs: number): boolean {
  if (tile.t_us === null) return true;
  return latestTUs - tile.t_us > STALE_AFTER_US;
}

function reduceVital(state: DashboardState, v: VitalStream): DashboardState {
  const name = v.vital as VitalName;
  if (!VITALS.includes(name)) return state;
  const tiles = { ...state.tiles, [name]: { values: v.values, t_us: v.t_us } };
  const history = state.history.concat({ t_us: v.t_us, vital: v.vital, value: v.values[0] });
  return {
    ...state,
    tiles,
    history,
    latestTUs: Math.max(state.latestTUs, v.t_us),
    bpMeasuring: name === "bp" ? false : state.bpMeasuring,
  };
}

function parseEchoInt(hex: string): number | null {
  if (!hex) return null;
  const bytes = hex.match(/../g);
  if (!bytes) return null;
  let out = 0;
  bytes.forEach((b, i) => {
    out += parseInt(b, 16) << (8 * i); // little-endian echo
  });
  return out;
}

/** Apply an acknowledged command: control state mutates only here. */
function reduceAck(state: DashboardState, seq: number, ack: AckPayload,
                   pending: Map<number, PendingCommand>): DashboardState {
  const cmd = pending.get(seq);
  pending.delete(seq);
  if (!ack.ok) {
    return { ...state, lastError: { cmd: ack.cmd, err_name: ack.err_name } };
  }
  const next = { ...state, lastError: null };
  const args = cmd?.args ?? {};
  switch (ack.cmd) {
    case "set_audio_mode": {
      const code = parseEchoInt(ack.value);
      next.audioMode = (["off", "anc", "passthrough"] as const)[code ?? 0] ?? "off";
      break;
    }
    case "set_led_current": {
      const ma = parseEchoInt(ack.value);
      if (ma !== null) next.ledCurrentMa = ma;
      break;
    }
    case "set_sampling_rate": {
      const hz = parseEchoInt(ack.value);
      const periph = String(args["peripheral"] ?? "");
      if (hz !== null && periph) {
        next.sensorRates = { ...state.sensorRates, [periph]: hz };
      }
      break;
    }
    case "toggle_sensor":
    case "start_recording":
    case "stop_recording": {
      const on = parseEchoInt(ack.value) === 1;
      const periph = String(args["peripheral"] ?? "");
      if (periph) next.recording = { ...state.recording, [periph]: on };
      break;
    }
    case "start_bp_measurement":
      next.bpMeasuring = true;
      break;
  }
  return next;
}

export function reduce(state: DashboardState, message: GatewayMessage,
                       pending: Map<number, PendingCommand>): DashboardState {
  switch (message.type) {
    case "hello":
      return { ...state, connected: true,
               scenario: String(message.payload["scenario"] ?? "") };
    case "stream": {
      const payload = message.payload as unknown as StreamPayload;
      if (payload.kind === "vital") return reduceVital(state, payload);
      if (payload.kind === "plot") {
        const p = payload;
        return {
          ...state,
          latestTUs: Math.max(state.latestTUs, p.t_us),
          plotRates: { ...state.plotRates, [p.peripheral]: p.fs },
        };
      }
      return state;
    }
    case "ack":
      return reduceAck(state, message.seq, message.payload as unknown as AckPayload, pending);
    case "error":
      return { ...state, lastError: { cmd: "", err_name: String(message.payload["message"]) } };
    default:
      return state;
  }
}

export function markDisconnected(state: DashboardState): DashboardState {
  return { ...state, connected: false };
}
