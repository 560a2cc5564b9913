export type Phase = "gate" | "viewing" | "delay" | "probe" | "respond" | "done";

export type ResponseChoice = "same" | "different" | "none";

export interface UiConfig {
  probe_ms: number;
  generation_budget_ms: number;
  response_window_ms: number;
  blur_scale: number;
  fixation_proxy: string;
  stimulus_side: number;
  fovea_radius_px: number;
  keys: { same: string; different: string };
}

export interface TrialInfo {
  index: number;
  phase: string;
  target_count: number;
  stimulus_id: string;
  fixation_count: number;
}

export interface SessionState {
  session_id: string;
  n_trials: number;
  current_trial: number;
  probe_ms: number;
  response_window_ms: number;
  generation_budget_ms: number;
  blur_scale: number;
  trials: TrialInfo[];
}

export interface FixationAck {
  status: "continue" | "complete";
  count: number;
  target: number;
}

export interface ProbeResult {
  status: "ready" | "pending" | "excluded";
  blob?: Blob;
  probeMs?: number;
}

export interface TrialTimings {
  fixationTimes: number[];
  probeOnset: number;
  probeOffset: number;
  measuredProbeMs: number;
  rtMs: number;
}
