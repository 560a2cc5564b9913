import type { ResponseChoice } from "./types.js";

export interface Clock {
  now(): number;
  setTimeout(fn: () => void, ms: number): unknown;
  clearTimeout(handle: unknown): void;
  requestFrame(fn: (t: number) => void): void;
}

export const realClock: Clock = {
  now: () => performance.now(),
  setTimeout: (fn, ms) => setTimeout(fn, ms),
  clearTimeout: (h) => clearTimeout(h as number),
  requestFrame:
    typeof requestAnimationFrame === "function"
      ? (fn) => requestAnimationFrame(fn)
      : (fn) => setTimeout(() => fn(performance.now()), 16),
};

export interface ProbeTiming {
  onset: number;
  offset: number;
  measuredMs: number;
}

/**
 * Shows the probe for probeMs using frame-accurate scheduling: the offset is
 * committed on the first frame whose timestamp reaches onset + probeMs minus
 * half a frame, so the displayed duration lands within one frame of the
 * target.  `show`/`hide` do the actual drawing.
 */
export function showProbe(
  probeMs: number,
  show: () => void,
  hide: () => void,
  clock: Clock = realClock,
  frameMs = 1000 / 60,
): Promise<ProbeTiming> {
  return new Promise((resolve) => {
    clock.requestFrame(() => {
      show();
      const onset = clock.now();
      const tick = () => {
        const elapsed = clock.now() - onset;
        if (elapsed >= probeMs - frameMs / 2) {
          hide();
          const offset = clock.now();
          resolve({ onset, offset, measuredMs: offset - onset });
        } else {
          clock.requestFrame(tick);
        }
      };
      clock.requestFrame(tick);
    });
  });
}

export interface ResponseCapture {
  choice: ResponseChoice;
  rtMs: number;
}

/**
 * Forced-choice capture: first mapped keypress wins, later presses are
 * ignored, and hitting the response window records "none".  rtMs is measured
 * from the respond-phase onset on the monotonic clock.
 */
export function captureResponse(
  target: EventTarget,
  keys: { same: string; different: string },
  windowMs: number,
  clock: Clock = realClock,
): Promise<ResponseCapture> {
  return new Promise((resolve) => {
    const onset = clock.now();
    let settled = false;
    const finish = (choice: ResponseChoice, rtMs: number) => {
      if (settled) return;
      settled = true;
      target.removeEventListener("keydown", onKey as EventListener);
      clock.clearTimeout(timer);
      resolve({ choice, rtMs });
    };
    const onKey = (ev: KeyboardEvent) => {
      const key = ev.key.toLowerCase();
      let choice: ResponseChoice | null = null;
      if (key === keys.same.toLowerCase()) choice = "same";
      else if (key === keys.different.toLowerCase()) choice = "different";
      if (choice === null) return;
      const rt = clock.now() - onset;
      if (rt > windowMs) {
        finish("none", rt);
      } else {
        finish(choice, rt);
      }
    };
    const timer = clock.setTimeout(() => finish("none", windowMs), windowMs);
    target.addEventListener("keydown", onKey as EventListener);
  });
}

/** Poll with linear backoff until fn resolves to a non-null value. */
export async function pollWithBackoff<T>(
  fn: () => Promise<T | null>,
  opts: { initialMs?: number; maxMs?: number; deadlineMs?: number; clock?: Clock } = {},
): Promise<T> {
  const clock = opts.clock ?? realClock;
  const start = clock.now();
  let wait = opts.initialMs ?? 100;
  const maxWait = opts.maxMs ?? 800;
  const deadline = opts.deadlineMs ?? 30_000;
  for (;;) {
    const value = await fn();
    if (value !== null) return value;
    if (clock.now() - start > deadline) throw new Error("poll deadline exceeded");
    await new Promise<void>((r) => clock.setTimeout(r, wait));
    wait = Math.min(wait * 1.5, maxWait);
  }
}
