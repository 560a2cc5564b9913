import { ApiClient } from "./api.js";
import type { Display } from "./display.js";
import { Clock, captureResponse, pollWithBackoff, realClock, showProbe } from "./timing.js";
import { TrialViewState } from "./state.js";
import type { ResponseChoice, SessionState, TrialInfo, TrialTimings, UiConfig } from "./types.js";

export interface TrialResult {
  trial: number;
  stimulusId: string;
  completed: boolean;
  excluded: boolean;
  choice: ResponseChoice | null;
  timings: TrialTimings;
}

export interface RunnerOptions {
  clock?: Clock;
  keyTarget?: EventTarget;
  responseWindowMs?: number; // override for tests; defaults to the session's
  probePollDeadlineMs?: number;
}

/**
 * Drives the trial sequence: gate click, mouse-contingent viewing with click
 * fixations, generation delay with probe polling, frame-timed probe flash,
 * forced-choice capture.  All network and rendering go through the injected
 * ApiClient and Display, so the same code runs in the browser and headless.
 */
export class TrialRunner {
  private clickQueue: Array<(pt: { x: number; y: number }) => void> = [];
  state: TrialViewState | null = null;

  constructor(
    private api: ApiClient,
    private display: Display,
    private config: UiConfig,
    private session: SessionState,
    private opts: RunnerOptions = {},
  ) {}

  private get clock(): Clock {
    return this.opts.clock ?? realClock;
  }

  /** Entry point for pointer events (image pixel coordinates). */
  clickAt(x: number, y: number): void {
    const next = this.clickQueue.shift();
    if (next) next({ x, y });
    // clicks with no waiter (e.g. during probe) are ignored
  }

  private awaitClick(): Promise<{ x: number; y: number }> {
    return new Promise((resolve) => this.clickQueue.push(resolve));
  }

  async runTrial(info: TrialInfo): Promise<TrialResult> {
    const sid = this.session.session_id;
    const t = info.index;
    const state = new TrialViewState(info.target_count);
    this.state = state;
    const timings: TrialTimings = {
      fixationTimes: [],
      probeOnset: -1,
      probeOffset: -1,
      measuredProbeMs: -1,
      rtMs: -1,
    };
    const result: TrialResult = {
      trial: t,
      stimulusId: info.stimulus_id,
      completed: false,
      excluded: false,
      choice: null,
      timings,
    };

    // central-fixation gate (drift-check stand-in)
    this.display.showGate();
    await this.awaitClick();
    state.advance("viewing");

    const stimulusResp = await fetch(this.api.stimulusUrl(sid, t));
    const stimulus = await stimulusResp.blob();
    await this.display.beginViewing(stimulus, this.session.blur_scale, this.config.fovea_radius_px);

    const viewingStart = this.clock.now();
    for (;;) {
      const pt = await this.awaitClick();
      const tMs = this.clock.now() - viewingStart;
      const done = state.addFixation(pt.x, pt.y, tMs);
      timings.fixationTimes.push(tMs);
      this.display.moveWindow(pt.x, pt.y);
      const ack = await this.api.postFixation(sid, t, pt.x, pt.y, tMs);
      if (done || ack.status === "complete") break;
    }
    state.advance("delay");
    this.display.showDelayCross();

    const probe = await pollWithBackoff(
      async () => {
        const r = await this.api.fetchProbe(sid, t);
        return r.status === "pending" ? null : r;
      },
      { clock: this.clock, deadlineMs: this.opts.probePollDeadlineMs ?? 30_000 },
    );
    if (probe.status === "excluded") {
      result.excluded = true;
      this.display.showMessage("Trial excluded (generation over budget).");
      return result;
    }

    state.advance("probe");
    const { show, hide } = await this.display.preparedProbe(probe.blob!);
    const probeTiming = await showProbe(probe.probeMs ?? this.config.probe_ms, show, hide, this.clock);
    timings.probeOnset = probeTiming.onset;
    timings.probeOffset = probeTiming.offset;
    timings.measuredProbeMs = probeTiming.measuredMs;

    state.advance("respond");
    this.display.showRespondPrompt();
    const windowMs = this.opts.responseWindowMs ?? this.session.response_window_ms;
    const captured = await captureResponse(
      this.opts.keyTarget ?? window,
      this.config.keys,
      windowMs,
      this.clock,
    );
    state.recordResponse(captured.choice);
    timings.rtMs = captured.rtMs;
    await this.api.postResponse(sid, t, captured.choice, captured.rtMs);
    state.advance("done");
    result.completed = true;
    result.choice = captured.choice;
    return result;
  }

  async runSession(maxTrials?: number): Promise<TrialResult[]> {
    const results: TrialResult[] = [];
    const n = Math.min(maxTrials ?? this.session.n_trials, this.session.n_trials);
    for (let i = 0; i < n; i++) {
      const info = this.session.trials[i];
      if (!info) break;
      results.push(await this.runTrial(info));
    }
    this.display.showMessage("Session complete. Thank you!");
    return results;
  }
}
