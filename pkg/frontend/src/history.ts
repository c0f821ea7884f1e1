/** Client-side history aggregation into day/month/year buckets.
 * Virtual timestamps are offsets from the scenario start date. */

export type Bucket = "day" | "month" | "year";

export interface HistoryPoint {
  t_us: number;
  vital: string;
  value: number;
}

export interface Aggregate {
  bucket: string;
  mean: number;
  min: number;
  max: number;
  count: number;
}

function bucketKey(tUs: number, bucket: Bucket, startMs: number): string {
  const date = new Date(startMs + tUs / 1000);
  const y = date.getUTCFullYear();
  const m = String(date.getUTCMonth() + 1).padStart(2, "0");
  const d = String(date.getUTCDate()).padStart(2, "0");
  if (bucket === "year") return `${y}`;
  if (bucket === "month") return `${y}-${m}`;
  return `${y}-${m}-${d}`;
}

export function aggregateHistory(points: HistoryPoint[], vital: string, bucket: Bucket,
                                 startMs = 0): Aggregate[] {
  const groups = new Map<string, number[]>();
  for (const p of points) {
    if (p.vital !== vital) continue;
    const key = bucketKey(p.t_us, bucket, startMs);
    const arr = groups.get(key) ?? [];
    arr.push(p.value);
    groups.set(key, arr);
  }
  return [...groups.entries()]
    .sort(([a], [b]) => (a < b ? -1 : 1))
    .map(([key, values]) => ({
      bucket: key,
      mean: values.reduce((s, v) => s + v, 0) / values.length,
      min: Math.min(...values),
      max: Math.max(...values),
      count: values.length,
    }));
}
