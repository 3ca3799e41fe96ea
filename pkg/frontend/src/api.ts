/**
 * Thin typed wrappers over the viewer service endpoints. The UI never
 * recomputes similarities or statistics client-side; every displayed number
 * comes from these responses.
 */

import { poseString, ViewerState } from "./state.js";

export interface SceneInfo {
  primitive_count: number;
  feature_dim: number;
  queries: string[];
  has_head: boolean;
  bounds: { min: number[]; max: number[] };
  home_pose: number[];
  home_size: [number, number];
  snapshot_hash: string;
}

export interface QueryResult {
  name: string;
  threshold: number;
  selected: number;
  total: number;
  empty: boolean;
  mask_pixels: number;
  score_histogram: { counts: number[]; edges: number[] };
  mask_png_base64: string;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function getJson<T>(url: string, signal?: AbortSignal): Promise<T> {
  const res = await fetch(url, { method: "GET", signal });
  if (!res.ok) {
    let detail = `HTTP ${res.status}`;
    try {
      const body = await res.json();
      if (body && body.error) detail = body.error;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(res.status, detail);
  }
  return (await res.json()) as T;
}

export function fetchInfo(base = ""): Promise<SceneInfo> {
  return getJson<SceneInfo>(`${base}/api/info`);
}

/** Render URL for the current state; the <img> element loads it directly. */
export function renderUrl(state: ViewerState, w: number, h: number,
                          base = ""): string {
  const p = new URLSearchParams();
  p.set("pose", poseString(state));
  p.set("fov", String(state.fovDeg));
  p.set("w", String(w));
  p.set("h", String(h));
  p.set("channel", state.channel);
  if (state.channel === "attention") {
    p.set("query", state.query);
    p.set("threshold", String(state.threshold));
  }
  return `${base}/api/render?${p.toString()}`;
}

export function fetchQuery(name: string, threshold: number, base = "",
                           signal?: AbortSignal): Promise<QueryResult> {
  const p = new URLSearchParams();
  p.set("name", name);
  p.set("threshold", String(threshold));
  return getJson<QueryResult>(`${base}/api/query?${p.toString()}`, signal);
}

export function meshUrl(semantic: boolean, base = ""): string {
  return `${base}/api/mesh?semantic=${semantic ? 1 : 0}`;
}
