import { describe, expect, it } from "vitest";
import {
  CHANNELS,
  DEFAULT_STATE,
  normalizeState,
  poseString,
  stateFromFragment,
  stateToFragment,
  ViewerState,
} from "../src/state.js";

function parsePose(s: string): number[][] {
  const vals = s.split(",").map(Number);
  expect(vals).toHaveLength(12);
  for (const v of vals) expect(Number.isFinite(v)).toBe(true);
  return [vals.slice(0, 4), vals.slice(4, 8), vals.slice(8, 12)];
}

function dot(a: number[], b: number[]): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

describe("normalizeState", () => {
  it("wraps azimuth into [0, 360)", () => {
    expect(normalizeState({ ...DEFAULT_STATE, azimuthDeg: 370 }).azimuthDeg)
      .toBeCloseTo(10, 10);
    expect(normalizeState({ ...DEFAULT_STATE, azimuthDeg: -30 }).azimuthDeg)
      .toBeCloseTo(330, 10);
    expect(normalizeState({ ...DEFAULT_STATE, azimuthDeg: 360 }).azimuthDeg).toBe(0);
  });

  it("clamps elevation, fov and threshold", () => {
    const s = normalizeState({
      ...DEFAULT_STATE, elevationDeg: 120, fovDeg: 300, threshold: 5,
    });
    expect(s.elevationDeg).toBe(89);
    expect(s.fovDeg).toBe(120);
    expect(s.threshold).toBe(1);
    const t = normalizeState({
      ...DEFAULT_STATE, elevationDeg: -120, fovDeg: 1, threshold: -5,
    });
    expect(t.elevationDeg).toBe(-89);
    expect(t.fovDeg).toBe(10);
    expect(t.threshold).toBe(-1);
  });

  it("replaces a non-positive radius with the default", () => {
    expect(normalizeState({ ...DEFAULT_STATE, radius: 0 }).radius)
      .toBe(DEFAULT_STATE.radius);
    expect(normalizeState({ ...DEFAULT_STATE, radius: -2 }).radius)
      .toBe(DEFAULT_STATE.radius);
    expect(normalizeState({ ...DEFAULT_STATE, radius: NaN }).radius)
      .toBe(DEFAULT_STATE.radius);
    expect(normalizeState({ ...DEFAULT_STATE, radius: 7 }).radius).toBe(7);
  });

  it("falls back to the color channel for unknown names", () => {
    const s = normalizeState({
      ...DEFAULT_STATE, channel: "bogus" as ViewerState["channel"],
    });
    expect(s.channel).toBe("color");
  });

  it("is idempotent", () => {
    const once = normalizeState({
      ...DEFAULT_STATE, azimuthDeg: -45, elevationDeg: 200, threshold: 3,
    });
    expect(normalizeState(once)).toEqual(once);
  });
});

describe("poseString", () => {
  it("produces 12 finite comma-separated numbers", () => {
    parsePose(poseString(DEFAULT_STATE));
  });

  it("rows form an orthonormal right-handed basis", () => {
    for (const az of [0, 30, 123, 359]) {
      for (const el of [-80, -10, 0, 45, 89]) {
        const rows = parsePose(poseString({
          ...DEFAULT_STATE, azimuthDeg: az, elevationDeg: el,
        })).map((r) => r.slice(0, 3));
        for (let i = 0; i < 3; i++) {
          expect(dot(rows[i], rows[i])).toBeCloseTo(1, 6);
          for (let j = i + 1; j < 3; j++) {
            expect(dot(rows[i], rows[j])).toBeCloseTo(0, 6);
          }
        }
        // right x down = forward for a right-handed row basis
        const [r, d, f] = rows;
        expect(r[1] * d[2] - r[2] * d[1]).toBeCloseTo(f[0], 6);
        expect(r[2] * d[0] - r[0] * d[2]).toBeCloseTo(f[1], 6);
        expect(r[0] * d[1] - r[1] * d[0]).toBeCloseTo(f[2], 6);
      }
    }
  });

  it("places the target on the camera axis at the orbit radius", () => {
    const s: ViewerState = {
      ...DEFAULT_STATE, target: [0.3, -0.2, 0.5], radius: 2.5,
      azimuthDeg: 70, elevationDeg: -20,
    };
    const rows = parsePose(poseString(s));
    const cam = rows.map((row) =>
      row[0] * s.target[0] + row[1] * s.target[1] + row[2] * s.target[2] + row[3]);
    // target in camera frame sits straight ahead at distance radius
    expect(cam[0]).toBeCloseTo(0, 5);
    expect(cam[1]).toBeCloseTo(0, 5);
    expect(cam[2]).toBeCloseTo(s.radius, 5);
  });

  it("keeps the image upright: the right axis has no world-z component", () => {
    const rows = parsePose(poseString({
      ...DEFAULT_STATE, azimuthDeg: 211, elevationDeg: 37,
    }));
    expect(rows[0][2]).toBeCloseTo(0, 6);
  });
});

describe("fragment round-trip", () => {
  it("restores every field exactly", () => {
    const s: ViewerState = {
      target: [0.1, -0.25, 0.75],
      radius: 3.5,
      azimuthDeg: 211.5,
      elevationDeg: -33.25,
      fovDeg: 47,
      channel: "attention",
      query: "red sphere",
      threshold: 0.35,
    };
    expect(stateFromFragment(stateToFragment(s))).toEqual(s);
  });

  it("round-trips every channel", () => {
    for (const ch of CHANNELS) {
      const s = { ...DEFAULT_STATE, channel: ch };
      expect(stateFromFragment(stateToFragment(s)).channel).toBe(ch);
    }
  });

  it("accepts a leading # and preserves query names with spaces", () => {
    const s = { ...DEFAULT_STATE, query: "wooden table leg" };
    expect(stateFromFragment(`#${stateToFragment(s)}`)).toEqual(s);
  });

  it("falls back to defaults for an empty or junk fragment", () => {
    expect(stateFromFragment("")).toEqual(DEFAULT_STATE);
    expect(stateFromFragment("#not&a=fragment")).toEqual(DEFAULT_STATE);
    expect(stateFromFragment("#r=banana&el=xyz")).toEqual(DEFAULT_STATE);
  });

  it("normalizes out-of-range fragment values", () => {
    const s = stateFromFragment("#az=-90&el=500&fov=1&th=9&r=-1");
    expect(s.azimuthDeg).toBe(270);
    expect(s.elevationDeg).toBe(89);
    expect(s.fovDeg).toBe(10);
    expect(s.threshold).toBe(1);
    expect(s.radius).toBe(DEFAULT_STATE.radius);
  });

  it("serialization is stable: frag(parse(frag)) == frag", () => {
    const frag = stateToFragment({
      ...DEFAULT_STATE, azimuthDeg: 123.456, query: "sphere",
    });
    expect(stateToFragment(stateFromFragment(frag))).toBe(frag);
  });
});
