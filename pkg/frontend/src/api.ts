import type { FixationAck, ProbeResult, SessionState, UiConfig } from "./types.js";

/** Thin typed client for the trial service; one in-flight request per phase
 * is the caller's responsibility. */
export class ApiClient {
  constructor(private base: string = "") {}

  private url(path: string): string {
    return `${this.base}${path}`;
  }

  async getConfig(): Promise<UiConfig> {
    const r = await fetch(this.url("/config"));
    if (!r.ok) throw new Error(`config fetch failed: ${r.status}`);
    return (await r.json()) as UiConfig;
  }

  async createSession(body: Record<string, unknown> = {}): Promise<SessionState> {
    const r = await fetch(this.url("/sessions"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!r.ok) throw new Error(`session create failed: ${r.status}`);
    return (await r.json()) as SessionState;
  }

  async getSession(sid: string): Promise<SessionState> {
    const r = await fetch(this.url(`/sessions/${sid}`));
    if (!r.ok) throw new Error(`session fetch failed: ${r.status}`);
    return (await r.json()) as SessionState;
  }

  stimulusUrl(sid: string, trial: number): string {
    return this.url(`/sessions/${sid}/trials/${trial}/stimulus`);
  }

  /** Posts one fixation in image pixel coordinates. */
  async postFixation(sid: string, trial: number, x: number, y: number, tMs: number): Promise<FixationAck> {
    const r = await fetch(this.url(`/sessions/${sid}/trials/${trial}/fixations`), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ x, y, t_ms: tMs }),
    });
    if (!r.ok) throw new Error(`fixation rejected: ${r.status}`);
    return (await r.json()) as FixationAck;
  }

  async fetchProbe(sid: string, trial: number): Promise<ProbeResult> {
    const r = await fetch(this.url(`/sessions/${sid}/trials/${trial}/probe`));
    if (r.status === 202) return { status: "pending" };
    if (r.status === 410) return { status: "excluded" };
    if (!r.ok) throw new Error(`probe fetch failed: ${r.status}`);
    const probeMs = Number(r.headers.get("x-probe-ms") ?? "200");
    return { status: "ready", blob: await r.blob(), probeMs };
  }

  async postResponse(
    sid: string,
    trial: number,
    response: string,
    rtMs: number,
  ): Promise<Record<string, unknown>> {
    const r = await fetch(this.url(`/sessions/${sid}/trials/${trial}/response`), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ response, rt_ms: rtMs }),
    });
    if (!r.ok) throw new Error(`response rejected: ${r.status}`);
    return (await r.json()) as Record<string, unknown>;
  }

  async exportJsonl(sid: string): Promise<string> {
    const r = await fetch(this.url(`/sessions/${sid}/export`));
    if (!r.ok) throw new Error(`export failed: ${r.status}`);
    return await r.text();
  }
}
