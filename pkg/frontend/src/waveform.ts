// Scrolling level meter for the recording screen. Keeps a ring of recent
// peak levels and redraws on every push, so the display rate equals the
// capture frame rate.

export class WaveformRenderer {
  private levels: number[] = [];
  private readonly ctx: CanvasRenderingContext2D | null;
  updateCount = 0;

  constructor(
    private readonly canvas: HTMLCanvasElement,
    private readonly maxBars = 120,
  ) {
    // jsdom has no 2D context; rendering degrades to counting updates
    this.ctx = canvas.getContext ? canvas.getContext("2d") : null;
  }

  push(level: number): void {
    this.levels.push(Math.max(0, Math.min(1, level)));
    if (this.levels.length > this.maxBars) {
      this.levels.shift();
    }
    this.updateCount += 1;
    this.draw();
  }

  reset(): void {
    this.levels = [];
    this.updateCount = 0;
    this.draw();
  }

  private draw(): void {
    if (!this.ctx) {
      return;
    }
    const { width, height } = this.canvas;
    this.ctx.clearRect(0, 0, width, height);
    this.ctx.fillStyle = "#2d7dd2";
    const barWidth = width / this.maxBars;
    for (let i = 0; i < this.levels.length; i++) {
      const h = Math.max(2, this.levels[i] * height);
      const x = i * barWidth;
      this.ctx.fillRect(x, (height - h) / 2, Math.max(1, barWidth - 1), h);
    }
  }
}
