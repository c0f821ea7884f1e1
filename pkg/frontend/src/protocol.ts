/** Gateway wire protocol: JSON messages {type, seq, payload} over WebSocket. */

export type VitalName = "hr" | "hrv" | "rr" | "spo2" | "temp_core" | "bp";

export interface VitalStream {
  kind: "vital";
  t_us: number;
  vital: string;
  values: number[];
}

export interface PlotStream {
  kind: "plot";
  t_us: number;
  fs: number;
  peripheral: string;
  n: number;
}

export interface SummaryStream {
  kind: "summary";
  [key: string]: unknown;
}

export type StreamPayload = VitalStream | PlotStream | SummaryStream;

export interface AckPayload {
  cmd: string;
  ok: boolean;
  err: number;
  err_name: string;
  value: string; // hex echo of the applied value
}

export interface GatewayMessage {
  type: "hello" | "command" | "ack" | "stream" | "error";
  seq: number;
  payload: Record<string, unknown>;
}

export type CommandName =
  | "set_audio_mode"
  | "start_bp_measurement"
  | "set_sampling_rate"
  | "set_led_current"
  | "toggle_sensor"
  | "start_recording"
  | "stop_recording";

export interface Command {
  cmd: CommandName;
  args: Record<string, unknown>;
}

export const VITALS: VitalName[] = ["hr", "hrv", "rr", "spo2", "temp_core", "bp"];

export const VITAL_LABELS: Record<VitalName, string> = {
  hr: "Heart rate",
  hrv: "HRV (RMSSD)",
  rr: "Respiration",
  spo2: "SpO2",
  temp_core: "Temperature",
  bp: "Blood pressure",
};

export const VITAL_UNITS: Record<VitalName, string> = {
  hr: "bpm",
  hrv: "ms",
  rr: "breaths/min",
  spo2: "%",
  temp_core: "°C",
  bp: "mmHg",
};

export function formatVital(name: VitalName, values: number[]): string {
  if (values.length === 0) return "—";
  if (name === "bp" && values.length >= 2) {
    return `${values[0].toFixed(0)}/${values[1].toFixed(0)}`;
  }
  const digits = name === "temp_core" ? 1 : name === "spo2" ? 1 : 0;
  return values[0].toFixed(digits);
}
