import { ApiClient } from "./api.js";
import { CanvasDisplay } from "./display.js";
import { TrialRunner } from "./runner.js";

async function boot(): Promise<void> {
  const api = new ApiClient("");
  const config = await api.getConfig();
  const canvas = document.getElementById("stage") as HTMLCanvasElement;
  const message = document.getElementById("message") as HTMLElement;
  canvas.width = canvas.height = Math.max(config.stimulus_side * 6, 384);

  const session = await api.createSession({});
  const display = new CanvasDisplay(canvas, message, config.stimulus_side);
  const runner = new TrialRunner(api, display, config, session);

  // display geometry cannot be enforced in-browser; log it with the session
  console.info("viewport", {
    width: window.innerWidth,
    height: window.innerHeight,
    dpr: window.devicePixelRatio,
    session: session.session_id,
  });

  canvas.addEventListener("click", (ev) => {
    const { x, y } = display.viewToImage(ev.clientX, ev.clientY);
    runner.clickAt(x, y);
  });
  canvas.addEventListener("mousemove", (ev) => {
    if (runner.state?.phase === "viewing") {
      const { x, y } = display.viewToImage(ev.clientX, ev.clientY);
      display.moveWindow(x, y);
    }
  });

  const results = await runner.runSession();
  const done = results.filter((r) => r.completed).length;
  message.textContent = `Done: ${done}/${results.length} trials recorded.`;
}

boot().catch((err) => {
  const message = document.getElementById("message");
  if (message) message.textContent = `Trial aborted: ${err}`;
  console.error(err);
});
