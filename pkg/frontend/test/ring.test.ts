import { describe, expect, it } from "vitest";

import { aggregateHistory } from "../src/history.js";
import { SignalRing } from "../src/ring.js";

describe("live plot ring buffer", () => {
  it("keeps only the last 10 seconds", () => {
    const ring = new SignalRing(10_000_000);
    for (let block = 0; block < 30; block++) {
      ring.pushBlock(block * 1_000_000, 50, new Array(50).fill(block));
    }
    const points = ring.snapshot();
    expect(points[0].t_us).toBeGreaterThanOrEqual(ring.latest() - 10_000_000);
    expect(points.length).toBeLessThanOrEqual(50 * 10 + 50);
  });

  it("point count at 50 Hz over 10 s is 500", () => {
    const ring = new SignalRing(10_000_000);
    for (let block = 0; block < 12; block++) {
      ring.pushBlock(block * 1_000_000, 50, new Array(50).fill(0));
    }
    expect(ring.density(ring.latest() - 10_000_000, ring.latest())).toBeCloseTo(50, 0);
  });

  it("density doubles after a rate change at the switch timestamp", () => {
    const ring = new SignalRing(10_000_000);
    for (let block = 0; block < 5; block++) {
      ring.pushBlock(block * 1_000_000, 50, new Array(50).fill(0));
    }
    const switchUs = 5_000_000;
    for (let block = 5; block < 10; block++) {
      ring.pushBlock(block * 1_000_000, 100, new Array(100).fill(0));
    }
    const before = ring.density(switchUs - 4_000_000, switchUs);
    const after = ring.density(switchUs, switchUs + 4_000_000);
    expect(after / before).toBeCloseTo(2, 1);
  });

  it("clear empties the buffer (sensor toggled off)", () => {
    const ring = new SignalRing();
    ring.pushBlock(0, 50, [1, 2, 3]);
    ring.clear();
    expect(ring.snapshot()).toEqual([]);
  });
});

describe("history aggregation", () => {
  const day = 86_400_000_000; // us
  const points = [
    { t_us: 0, vital: "hr", value: 60 },
    { t_us: 1_000_000, vital: "hr", value: 70 },
    { t_us: day + 1_000_000, vital: "hr", value: 80 },
    { t_us: 40 * day, vital: "hr", value: 90 },
    { t_us: 2_000_000, vital: "rr", value: 15 },
  ];

  it("buckets by day with per-bucket stats", () => {
    const agg = aggregateHistory(points, "hr", "day");
    expect(agg.length).toBe(3);
    expect(agg[0]).toMatchObject({ mean: 65, min: 60, max: 70, count: 2 });
  });

  it("buckets by month and year", () => {
    expect(aggregateHistory(points, "hr", "month").length).toBe(2);
    expect(aggregateHistory(points, "hr", "year").length).toBe(1);
  });

  it("filters by vital", () => {
    expect(aggregateHistory(points, "rr", "day").length).toBe(1);
  });
});
