/**
 * Debounce plus latest-wins request scheduling: rapid state changes collapse
 * into one request after a quiet window, and a newer request aborts the
 * in-flight one so stale responses never land.
 */

export const DEBOUNCE_MS = 150;

export function debounce<A extends unknown[]>(
  fn: (...args: A) => void, waitMs = DEBOUNCE_MS): (...args: A) => void {
  let timer: ReturnType<typeof setTimeout> | null = null;
  return (...args: A) => {
    if (timer !== null) clearTimeout(timer);
    timer = setTimeout(() => {
      timer = null;
      fn(...args);
    }, waitMs);
  };
}

/**
 * Runs async tasks so that at most one is in flight; starting a new task
 * aborts the previous one and resolves only for the latest submission.
 */
export class LatestWins {
  private controller: AbortController | null = null;
  private seq = 0;

  async run<T>(task: (signal: AbortSignal) => Promise<T>): Promise<T | null> {
    this.controller?.abort();
    const controller = new AbortController();
    this.controller = controller;
    const ticket = ++this.seq;
    try {
      const value = await task(controller.signal);
      return ticket === this.seq ? value : null;
    } catch (err) {
      if (controller.signal.aborted) return null;
      throw err;
    }
  }

  get inFlight(): boolean {
    return this.controller !== null && !this.controller.signal.aborted;
  }
}
