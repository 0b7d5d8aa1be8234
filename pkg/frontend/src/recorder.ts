// Microphone capture. The browser pieces (getUserMedia + AudioContext)
// live behind the AudioFrameSource interface so the recording logic and
// the tests can run against an injected source.

export interface AudioFrameSource {
  /** Begin delivering Float32 frames; resolves with the sample rate. */
  start(onFrame: (frame: Float32Array) => void): Promise<number>;
  stop(): void;
}

const CAPTURE_BUFFER = 2048;

/**
 * Real microphone source. With a 2048-sample buffer every common device
 * rate (>= 22.05 kHz) delivers more than 10 frames per second, which is
 * what keeps the live waveform moving.
 */
export class MicrophoneSource implements AudioFrameSource {
  private ctx: AudioContext | null = null;
  private stream: MediaStream | null = null;
  private node: ScriptProcessorNode | null = null;

  async start(onFrame: (frame: Float32Array) => void): Promise<number> {
    this.stream = await navigator.mediaDevices.getUserMedia({ audio: true });
    this.ctx = new AudioContext();
    const source = this.ctx.createMediaStreamSource(this.stream);
    this.node = this.ctx.createScriptProcessor(CAPTURE_BUFFER, 1, 1);
    this.node.onaudioprocess = (ev) => {
      onFrame(new Float32Array(ev.inputBuffer.getChannelData(0)));
    };
    source.connect(this.node);
    this.node.connect(this.ctx.destination);
    return this.ctx.sampleRate;
  }

  stop(): void {
    this.node?.disconnect();
    this.stream?.getTracks().forEach((t) => t.stop());
    void this.ctx?.close();
    this.node = null;
    this.stream = null;
    this.ctx = null;
  }
}

export interface CaptureResult {
  samples: Float32Array;
  sampleRate: number;
  durationS: number;
}

export interface RecorderEvents {
  /** Per-frame peak level in [0, 1], for the waveform. */
  onLevel?(peak: number, elapsedS: number): void;
  /** Whole seconds remaining, for the countdown timer. */
  onTick?(secondsRemaining: number): void;
}

/**
 * Records a fixed-length clip (10 s per the measurement protocol),
 * forwarding one level update per captured frame. stop() ends the
 * capture early and resolves with whatever was recorded - the service
 * is the judge of whether that is long enough.
 */
export class Recorder {
  private frames: Float32Array[] = [];
  private pending: Float32Array[] = [];
  private collected = 0;
  private sampleRate = 0;
  private lastTick = -1;
  private stopRequested = false;
  private finish: ((r: CaptureResult) => void) | null = null;
  private events: RecorderEvents = {};

  constructor(
    private readonly source: AudioFrameSource,
    readonly durationS = 10,
  ) {}

  get running(): boolean {
    return this.finish !== null;
  }

  async start(events: RecorderEvents = {}): Promise<CaptureResult> {
    if (this.running) {
      throw new Error("recorder already running");
    }
    this.frames = [];
    this.pending = [];
    this.collected = 0;
    this.sampleRate = 0;
    this.lastTick = -1;
    this.stopRequested = false;
    this.events = events;
    const done = new Promise<CaptureResult>((resolve) => {
      this.finish = resolve;
    });
    // Frames may arrive before source.start resolves the sample rate;
    // elapsed time is meaningless until then, so hold them.
    this.sampleRate = await this.source.start((frame) => {
      if (this.sampleRate === 0) {
        this.pending.push(frame);
      } else {
        this.onFrame(frame);
      }
    });
    this.lastTick = this.durationS;
    events.onTick?.(this.durationS);
    for (const frame of this.pending.splice(0)) {
      this.onFrame(frame);
    }
    if (this.stopRequested) {
      this.complete();
    }
    return done;
  }

  /** End the capture early (user-initiated). */
  stop(): void {
    if (this.sampleRate === 0 && this.finish) {
      // still waiting on the source's rate: finish after held frames drain
      this.stopRequested = true;
      return;
    }
    this.complete();
  }

  private onFrame(frame: Float32Array): void {
    if (!this.finish) {
      return;
    }
    this.frames.push(frame);
    this.collected += frame.length;
    const elapsed = this.collected / this.sampleRate;

    let peak = 0;
    for (let i = 0; i < frame.length; i++) {
      const v = Math.abs(frame[i]);
      if (v > peak) {
        peak = v;
      }
    }
    this.events.onLevel?.(Math.min(1, peak), elapsed);

    const remaining = Math.max(0, Math.ceil(this.durationS - elapsed));
    if (remaining !== this.lastTick) {
      this.lastTick = remaining;
      this.events.onTick?.(remaining);
    }
    if (elapsed >= this.durationS) {
      this.complete();
    }
  }

  private complete(): void {
    const resolve = this.finish;
    if (!resolve) {
      return;
    }
    this.finish = null;
    this.source.stop();

    const samples = new Float32Array(this.collected);
    let offset = 0;
    for (const frame of this.frames) {
      samples.set(frame, offset);
      offset += frame.length;
    }
    this.frames = [];
    resolve({
      samples,
      sampleRate: this.sampleRate,
      durationS: this.sampleRate ? samples.length / this.sampleRate : 0,
    });
  }
}
