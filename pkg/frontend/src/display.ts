/** Rendering abstraction so the trial logic can run headless in tests.
 * All coordinates at this interface are stimulus pixel space; the canvas
 * implementation owns the scaling to screen pixels. */
export interface Display {
  showGate(): void;
  beginViewing(stimulus: Blob, blurScale: number, foveaRadius: number): Promise<void>;
  moveWindow(x: number, y: number): void;
  showDelayCross(): void;
  preparedProbe(blob: Blob): Promise<{ show: () => void; hide: () => void }>;
  showRespondPrompt(): void;
  showMessage(text: string): void;
  /** client (event) coordinates -> stimulus pixel coordinates */
  viewToImage(clientX: number, clientY: number): { x: number; y: number };
}

/**
 * Canvas renderer: blurred backdrop everywhere except a sharp circular
 * window at the cursor.  The blur mimics the generator's peripheral input by
 * downsampling to blurScale and stretching back up.
 */
export class CanvasDisplay implements Display {
  private ctx: CanvasRenderingContext2D;
  private sharp: HTMLCanvasElement | null = null;
  private blurred: HTMLCanvasElement | null = null;
  private radius = 8; // stimulus px

  constructor(
    private canvas: HTMLCanvasElement,
    private message: HTMLElement,
    private stimulusSide: number,
  ) {
    const ctx = canvas.getContext("2d");
    if (!ctx) throw new Error("2d canvas unavailable");
    this.ctx = ctx;
  }

  private get scale(): number {
    return this.canvas.width / this.stimulusSide;
  }

  private clear(fill = "#7f7f7f"): void {
    this.ctx.fillStyle = fill;
    this.ctx.fillRect(0, 0, this.canvas.width, this.canvas.height);
  }

  private drawCross(): void {
    const c = this.canvas.width / 2;
    this.ctx.strokeStyle = "#222";
    this.ctx.lineWidth = 2;
    this.ctx.beginPath();
    this.ctx.moveTo(c - 10, c);
    this.ctx.lineTo(c + 10, c);
    this.ctx.moveTo(c, c - 10);
    this.ctx.lineTo(c, c + 10);
    this.ctx.stroke();
  }

  showGate(): void {
    this.clear();
    this.drawCross();
    this.message.textContent = "Click the central cross to start the trial.";
  }

  async beginViewing(stimulus: Blob, blurScale: number, foveaRadius: number): Promise<void> {
    const bitmap = await createImageBitmap(stimulus);
    this.radius = foveaRadius;
    const side = this.canvas.width;
    const sharp = document.createElement("canvas");
    sharp.width = sharp.height = side;
    const sctx = sharp.getContext("2d")!;
    sctx.imageSmoothingEnabled = true;
    sctx.drawImage(bitmap, 0, 0, side, side);

    // peripheral view: downsample to the generator's blur scale, stretch back
    const small = document.createElement("canvas");
    const m = Math.max(1, Math.round(this.stimulusSide * blurScale));
    small.width = small.height = m;
    const smctx = small.getContext("2d")!;
    smctx.imageSmoothingEnabled = true;
    smctx.drawImage(bitmap, 0, 0, m, m);
    const blurred = document.createElement("canvas");
    blurred.width = blurred.height = side;
    const bctx = blurred.getContext("2d")!;
    bctx.imageSmoothingEnabled = true;
    bctx.drawImage(small, 0, 0, side, side);

    this.sharp = sharp;
    this.blurred = blurred;
    this.moveWindow(this.stimulusSide / 2, this.stimulusSide / 2);
    this.message.textContent = "Click where you want to look.";
  }

  moveWindow(x: number, y: number): void {
    if (!this.sharp || !this.blurred) return;
    const ctx = this.ctx;
    ctx.drawImage(this.blurred, 0, 0);
    ctx.save();
    ctx.beginPath();
    ctx.arc(x * this.scale, y * this.scale, this.radius * this.scale, 0, 2 * Math.PI);
    ctx.clip();
    ctx.drawImage(this.sharp, 0, 0);
    ctx.restore();
  }

  showDelayCross(): void {
    this.sharp = this.blurred = null;
    this.clear();
    this.drawCross();
    this.message.textContent = "Hold fixation...";
  }

  async preparedProbe(blob: Blob): Promise<{ show: () => void; hide: () => void }> {
    const bitmap = await createImageBitmap(blob);
    return {
      show: () => {
        this.ctx.imageSmoothingEnabled = true;
        this.ctx.drawImage(bitmap, 0, 0, this.canvas.width, this.canvas.height);
      },
      hide: () => this.clear(),
    };
  }

  showRespondPrompt(): void {
    this.message.textContent = "Same (F) or different (J)?";
  }

  showMessage(text: string): void {
    this.message.textContent = text;
  }

  viewToImage(clientX: number, clientY: number): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect();
    const sx = this.stimulusSide / rect.width;
    const sy = this.stimulusSide / rect.height;
    const eps = 1e-3;
    const x = Math.min(Math.max((clientX - rect.left) * sx, 0), this.stimulusSide - eps);
    const y = Math.min(Math.max((clientY - rect.top) * sy, 0), this.stimulusSide - eps);
    return { x, y };
  }
}
