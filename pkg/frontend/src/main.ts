/**
 * Viewer entry point: wires the orbit controls, channel/query selectors and
 * threshold slider to the service, keeps the URL fragment in sync, and
 * surfaces request errors in a banner.
 */

import { ApiError, fetchInfo, fetchQuery, meshUrl, renderUrl, SceneInfo } from "./api.js";
import { debounce, LatestWins } from "./debounce.js";
import {
  CHANNELS,
  DEFAULT_STATE,
  normalizeState,
  stateFromFragment,
  stateToFragment,
  ViewerState,
} from "./state.js";

const VIEW_W = 384;
const VIEW_H = 384;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

class Viewer {
  state: ViewerState;
  info: SceneInfo | null = null;
  private renderSeq = 0;
  private queryRuns = new LatestWins();

  private image = el<HTMLImageElement>("view");
  private banner = el<HTMLDivElement>("banner");
  private channelSel = el<HTMLSelectElement>("channel");
  private querySel = el<HTMLSelectElement>("query");
  private slider = el<HTMLInputElement>("threshold");
  private sliderLabel = el<HTMLSpanElement>("threshold-value");
  private stats = el<HTMLDivElement>("stats");
  private histogram = el<HTMLCanvasElement>("histogram");
  private mask = el<HTMLImageElement>("mask");
  private meshLink = el<HTMLAnchorElement>("mesh-link");
  private semanticToggle = el<HTMLInputElement>("mesh-semantic");

  private scheduleRender = debounce(() => this.loadRender());
  private scheduleQuery = debounce(() => this.loadQuery());

  constructor() {
    this.state = stateFromFragment(location.hash);
    this.bindControls();
  }

  async start() {
    try {
      this.info = await fetchInfo();
      this.populateQueries(this.info.queries);
      this.clearBanner();
    } catch (err) {
      this.showBanner(`service unreachable: ${String(err)}`, true);
      return;
    }
    this.syncControls();
    this.loadRender();
    if (this.state.query) this.loadQuery();
  }

  private bindControls() {
    for (const ch of CHANNELS) {
      const opt = document.createElement("option");
      opt.value = ch;
      opt.textContent = ch;
      this.channelSel.appendChild(opt);
    }
    this.channelSel.addEventListener("change", () => {
      this.update({ channel: this.channelSel.value as ViewerState["channel"] });
    });
    this.querySel.addEventListener("change", () => {
      this.update({ query: this.querySel.value });
      this.scheduleQuery();
    });
    this.slider.addEventListener("input", () => {
      this.update({ threshold: Number(this.slider.value) });
      this.scheduleQuery();
    });
    this.semanticToggle.addEventListener("change", () => this.updateMeshLink());

    let dragging = false;
    let last = [0, 0];
    this.image.addEventListener("pointerdown", (e) => {
      dragging = true;
      last = [e.clientX, e.clientY];
      this.image.setPointerCapture(e.pointerId);
    });
    this.image.addEventListener("pointermove", (e) => {
      if (!dragging) return;
      const dx = e.clientX - last[0];
      const dy = e.clientY - last[1];
      last = [e.clientX, e.clientY];
      this.update({
        azimuthDeg: this.state.azimuthDeg - dx * 0.4,
        elevationDeg: this.state.elevationDeg + dy * 0.4,
      });
    });
    this.image.addEventListener("pointerup", () => { dragging = false; });
    this.image.addEventListener("wheel", (e) => {
      e.preventDefault();
      this.update({ radius: this.state.radius * (e.deltaY > 0 ? 1.1 : 0.9) });
    });
    window.addEventListener("hashchange", () => {
      const fresh = stateFromFragment(location.hash);
      if (stateToFragment(fresh) !== stateToFragment(this.state)) {
        this.state = fresh;
        this.syncControls();
        this.loadRender();
        if (this.state.query) this.loadQuery();
      }
    });
  }

  /** Applies a partial state change, reflects it in the fragment, and
   * schedules the debounced render. */
  update(patch: Partial<ViewerState>) {
    this.state = normalizeState({ ...this.state, ...patch });
    history.replaceState(null, "", `#${stateToFragment(this.state)}`);
    this.syncControls();
    this.scheduleRender();
  }

  private syncControls() {
    this.channelSel.value = this.state.channel;
    this.slider.value = String(this.state.threshold);
    this.sliderLabel.textContent = this.state.threshold.toFixed(2);
    if (this.state.query) this.querySel.value = this.state.query;
    this.updateMeshLink();
  }

  private populateQueries(names: string[]) {
    this.querySel.innerHTML = "";
    const blank = document.createElement("option");
    blank.value = "";
    blank.textContent = "(pick a query)";
    this.querySel.appendChild(blank);
    for (const name of names) {
      const opt = document.createElement("option");
      opt.value = name;
      opt.textContent = name;
      this.querySel.appendChild(opt);
    }
  }

  private loadRender() {
    if (this.state.channel === "attention" && !this.state.query) {
      this.showBanner("pick a query to view attention");
      return;
    }
    const seq = ++this.renderSeq;
    const url = renderUrl(this.state, VIEW_W, VIEW_H);
    const probe = new Image();
    probe.onload = () => {
      if (seq !== this.renderSeq) return;   // a newer render superseded this one
      this.image.src = url;
      this.clearBanner();
    };
    probe.onerror = () => {
      if (seq !== this.renderSeq) return;
      this.showBanner("render request failed", true);
    };
    probe.src = url;
  }

  private async loadQuery() {
    if (!this.state.query) return;
    try {
      const result = await this.queryRuns.run(
        (signal) => fetchQuery(this.state.query, this.state.threshold, "", signal));
      if (result === null) return;          // superseded
      this.stats.textContent = result.empty
        ? `no primitives above threshold ${result.threshold.toFixed(2)}`
        : `${result.selected} / ${result.total} primitives selected, `
          + `${result.mask_pixels} mask pixels`;
      this.mask.src = `data:image/png;base64,${result.mask_png_base64}`;
      this.drawHistogram(result.score_histogram.counts);
      this.clearBanner();
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        this.showBanner(`unknown query: ${this.state.query}`);
      } else {
        this.showBanner(`query failed: ${String(err)}`, true);
      }
    }
  }

  private drawHistogram(counts: number[]) {
    const ctx = this.histogram.getContext("2d");
    if (!ctx) return;
    const { width, height } = this.histogram;
    ctx.clearRect(0, 0, width, height);
    const peak = Math.max(1, ...counts);
    const bw = width / counts.length;
    ctx.fillStyle = "#4a90d9";
    counts.forEach((c, i) => {
      const bh = (c / peak) * (height - 2);
      ctx.fillRect(i * bw + 1, height - bh, bw - 2, bh);
    });
  }

  private updateMeshLink() {
    this.meshLink.href = meshUrl(this.semanticToggle.checked);
  }

  private showBanner(message: string, retry = false) {
    this.banner.textContent = message;
    this.banner.classList.remove("hidden");
    if (retry) {
      const btn = document.createElement("button");
      btn.textContent = "retry";
      btn.addEventListener("click", () => this.start());
      this.banner.appendChild(btn);
    }
  }

  private clearBanner() {
    this.banner.classList.add("hidden");
    this.banner.textContent = "";
  }
}

if (typeof document !== "undefined" && document.getElementById("view")) {
  const viewer = new Viewer();
  viewer.start();
  (globalThis as { viewer?: Viewer }).viewer = viewer;
}

export { Viewer, DEFAULT_STATE };
