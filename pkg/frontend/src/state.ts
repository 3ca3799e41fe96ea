/**
 * Viewer state: an orbit camera around a target point plus the display
 * options. The whole state round-trips through the URL fragment so a reload
 * (or a shared link) reproduces the view exactly.
 */

export type Channel = "color" | "depth" | "normal" | "attention";

export const CHANNELS: Channel[] = ["color", "depth", "normal", "attention"];

export interface ViewerState {
  target: [number, number, number];
  radius: number;          // > 0
  azimuthDeg: number;      // wrapped to [0, 360)
  elevationDeg: number;    // clamped to [-89, 89]
  fovDeg: number;          // clamped to [10, 120]
  channel: Channel;
  query: string;           // palette name, "" when none selected
  threshold: number;       // in [-1, 1]
}

export const DEFAULT_STATE: ViewerState = {
  target: [0, 0, 0.4],
  radius: 4,
  azimuthDeg: 30,
  elevationDeg: 25,
  fovDeg: 60,
  channel: "color",
  query: "",
  threshold: 0.6,
};

function wrap360(deg: number): number {
  const r = deg % 360;
  return r < 0 ? r + 360 : r;
}

function clamp(x: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, x));
}

/** Returns a copy with every field forced back into its legal range. */
export function normalizeState(s: ViewerState): ViewerState {
  return {
    ...s,
    target: [s.target[0], s.target[1], s.target[2]],
    radius: s.radius > 0 && isFinite(s.radius) ? s.radius : DEFAULT_STATE.radius,
    azimuthDeg: wrap360(s.azimuthDeg),
    elevationDeg: clamp(s.elevationDeg, -89, 89),
    fovDeg: clamp(s.fovDeg, 10, 120),
    channel: CHANNELS.includes(s.channel) ? s.channel : "color",
    threshold: clamp(s.threshold, -1, 1),
  };
}

/**
 * Row-major 3x4 world-to-camera pose for the orbit state, as the
 * comma-separated string the render endpoint expects. World up is +z and
 * camera rows are [right, down, forward], matching the service convention.
 */
export function poseString(s: ViewerState): string {
  const az = (s.azimuthDeg * Math.PI) / 180;
  const el = (s.elevationDeg * Math.PI) / 180;
  const eye = [
    s.target[0] + s.radius * Math.cos(el) * Math.cos(az),
    s.target[1] + s.radius * Math.cos(el) * Math.sin(az),
    s.target[2] + s.radius * Math.sin(el),
  ];
  let fwd = [s.target[0] - eye[0], s.target[1] - eye[1], s.target[2] - eye[2]];
  const fl = Math.hypot(fwd[0], fwd[1], fwd[2]);
  fwd = fwd.map((v) => v / fl);
  // right = normalize(up x forward), up = +z
  let right = [-fwd[1], fwd[0], 0];
  const rl = Math.hypot(right[0], right[1], right[2]);
  right = rl > 1e-9 ? right.map((v) => v / rl) : [1, 0, 0];
  const down = [
    fwd[1] * right[2] - fwd[2] * right[1],
    fwd[2] * right[0] - fwd[0] * right[2],
    fwd[0] * right[1] - fwd[1] * right[0],
  ];
  const R = [right, down, fwd];
  const t = R.map((row) => -(row[0] * eye[0] + row[1] * eye[1] + row[2] * eye[2]));
  const vals: number[] = [];
  for (let i = 0; i < 3; i++) vals.push(R[i][0], R[i][1], R[i][2], t[i]);
  return vals.map((v) => v.toPrecision(8)).join(",");
}

/** Serializes the state into a URL fragment (without the leading "#"). */
export function stateToFragment(s: ViewerState): string {
  const p = new URLSearchParams();
  p.set("tx", String(s.target[0]));
  p.set("ty", String(s.target[1]));
  p.set("tz", String(s.target[2]));
  p.set("r", String(s.radius));
  p.set("az", String(s.azimuthDeg));
  p.set("el", String(s.elevationDeg));
  p.set("fov", String(s.fovDeg));
  p.set("ch", s.channel);
  if (s.query) p.set("q", s.query);
  p.set("th", String(s.threshold));
  return p.toString();
}

/** Parses a URL fragment back into a state; missing/bad fields fall back to
 * the defaults and out-of-range values are normalized. */
export function stateFromFragment(fragment: string): ViewerState {
  const p = new URLSearchParams(fragment.replace(/^#/, ""));
  const num = (key: string, fallback: number): number => {
    const raw = p.get(key);
    if (raw === null) return fallback;
    const v = Number(raw);
    return isFinite(v) ? v : fallback;
  };
  const d = DEFAULT_STATE;
  return normalizeState({
    target: [num("tx", d.target[0]), num("ty", d.target[1]), num("tz", d.target[2])],
    radius: num("r", d.radius),
    azimuthDeg: num("az", d.azimuthDeg),
    elevationDeg: num("el", d.elevationDeg),
    fovDeg: num("fov", d.fovDeg),
    channel: (p.get("ch") ?? d.channel) as Channel,
    query: p.get("q") ?? "",
    threshold: num("th", d.threshold),
  });
}
