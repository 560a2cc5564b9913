import type { Phase } from "./types.js";

const ORDER: Phase[] = ["gate", "viewing", "delay", "probe", "respond", "done"];

/** Per-trial view state; phases only advance (monotonic), responses are
 * accepted only in the respond phase, and the condition is never exposed
 * to the UI before the response is recorded. */
export class TrialViewState {
  phase: Phase = "gate";
  fixations: Array<{ x: number; y: number; tMs: number }> = [];
  target: number;
  probeOnset = -1;
  probeOffset = -1;
  respondDeadline = -1;
  response: string | null = null;

  constructor(target: number) {
    this.target = target;
  }

  advance(next: Phase): void {
    const from = ORDER.indexOf(this.phase);
    const to = ORDER.indexOf(next);
    if (to !== from + 1) {
      throw new Error(`illegal phase transition ${this.phase} -> ${next}`);
    }
    this.phase = next;
  }

  addFixation(x: number, y: number, tMs: number): boolean {
    if (this.phase !== "viewing") {
      throw new Error(`fixation outside viewing phase (${this.phase})`);
    }
    if (this.fixations.length >= this.target) {
      throw new Error("fixation after target count reached");
    }
    this.fixations.push({ x, y, tMs });
    return this.fixations.length >= this.target;
  }

  recordResponse(choice: string): void {
    if (this.phase !== "respond") {
      throw new Error(`response outside respond phase (${this.phase})`);
    }
    if (this.response !== null) {
      throw new Error("response already recorded");
    }
    this.response = choice;
  }
}
