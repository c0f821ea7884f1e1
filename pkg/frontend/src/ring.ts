/** Ring buffer holding the last N seconds of a sampled signal for live plots.
 * Rate changes keep older samples (their timestamps stand), so the rendered
 * point density visibly changes at the switchover instant. */

export interface PlotPoint {
  t_us: number;
  value: number;
}

export class SignalRing {
  private points: PlotPoint[] = [];

  constructor(readonly windowUs: number = 10_000_000) {}

  pushBlock(t0Us: number, fs: number, values: ArrayLike<number>): void {
    const stepUs = 1_000_000 / fs;
    for (let i = 0; i < values.length; i++) {
      this.points.push({ t_us: t0Us + Math.round(i * stepUs), value: Number(values[i]) });
    }
    const cutoff = this.latest() - this.windowUs;
    let drop = 0;
    while (drop < this.points.length && this.points[drop].t_us < cutoff) drop++;
    if (drop > 0) this.points.splice(0, drop);
  }

  latest(): number {
    return this.points.length ? this.points[this.points.length - 1].t_us : 0;
  }

  snapshot(): PlotPoint[] {
    return this.points.slice();
  }

  /** Points per second over a time span, for density assertions and axes. */
  density(fromUs: number, toUs: number): number {
    const n = this.points.filter((p) => p.t_us >= fromUs && p.t_us < toUs).length;
    const span = (toUs - fromUs) / 1e6;
    return span > 0 ? n / span : 0;
  }

  clear(): void {
    this.points = [];
  }
}
