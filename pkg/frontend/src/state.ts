// Console state: the frame buffer, the prompt/segment history including
// recomposition branches, playback position and latency bookkeeping.
//
// The frame buffer is append-only from the network side and read-only from
// the render side; replacing a suffix (recompose) retires the old branch
// intact so it can still be inspected side by side.

import type { FrameMessage, ServerMessage } from "./protocol.js";

export interface SegmentRecord {
  segment: number;
  text: string;
  startFrame: number;
  endFrame: number | null; // exclusive; null while streaming
  reason: string | null;
  promptSentAt: number | null; // ms timestamp when the prompt was submitted
  firstFrameLatencyMs: number | null;
}

export interface RetiredBranch {
  fromFrame: number;
  segments: SegmentRecord[];
  frames: FrameMessage[];
}

export type ConnectionStatus = "connecting" | "open" | "closed";

export class ConsoleState {
  status: ConnectionStatus = "connecting";
  frames: FrameMessage[] = [];
  segments: SegmentRecord[] = [];
  branches: RetiredBranch[] = [];
  playhead = 0;
  lastError: string | null = null;
  private pendingPromptAt: number | null = null;

  /** Call when a prompt or recompose request is sent, for latency measurement. */
  notePromptSent(now: number): void {
    this.pendingPromptAt = now;
  }

  get activeSegment(): SegmentRecord | null {
    const last = this.segments[this.segments.length - 1];
    return last && last.endFrame === null ? last : null;
  }

  get framesAhead(): number {
    return this.frames.length - this.playhead;
  }

  apply(msg: ServerMessage, now: number): void {
    switch (msg.type) {
      case "segment_start": {
        if (msg.start_frame < this.frames.length) {
          // dynamic recomposition: keep the prefix, retire the old suffix
          this.branches.push({
            fromFrame: msg.start_frame,
            segments: this.segments.filter((s) => s.startFrame >= msg.start_frame),
            frames: this.frames.slice(msg.start_frame),
          });
          this.segments = this.segments.filter((s) => s.startFrame < msg.start_frame);
          const overlapping = this.segments[this.segments.length - 1];
          if (overlapping && (overlapping.endFrame === null || overlapping.endFrame > msg.start_frame)) {
            overlapping.endFrame = msg.start_frame;
          }
          this.frames = this.frames.slice(0, msg.start_frame);
          this.playhead = Math.min(this.playhead, msg.start_frame);
        }
        this.segments.push({
          segment: msg.segment,
          text: msg.text,
          startFrame: msg.start_frame,
          endFrame: null,
          reason: null,
          promptSentAt: this.pendingPromptAt,
          firstFrameLatencyMs: null,
        });
        this.pendingPromptAt = null;
        break;
      }
      case "frame": {
        if (msg.index !== this.frames.length) {
          this.lastError = `frame index gap: expected ${this.frames.length}, got ${msg.index}`;
          return;
        }
        this.frames.push(msg);
        const seg = this.activeSegment;
        if (seg && seg.firstFrameLatencyMs === null && seg.promptSentAt !== null) {
          seg.firstFrameLatencyMs = now - seg.promptSentAt;
        }
        break;
      }
      case "segment_end": {
        const seg = this.activeSegment;
        if (seg) {
          seg.endFrame = seg.startFrame + msg.frames;
          seg.reason = msg.reason;
        }
        break;
      }
      case "error": {
        this.lastError = msg.message;
        break;
      }
    }
  }

  /** Next frame for playback, or null when caught up. Never mutates the buffer. */
  advancePlayhead(): FrameMessage | null {
    if (this.playhead >= this.frames.length) return null;
    return this.frames[this.playhead++];
  }

  /** Frame currently under the playhead (for re-rendering while paused). */
  currentFrame(): FrameMessage | null {
    const i = Math.min(this.playhead, this.frames.length) - 1;
    return i >= 0 ? this.frames[i] : null;
  }

  /** Completed segments eligible as recompose anchors (1-based cut points). */
  recomposeAnchors(): SegmentRecord[] {
    return this.segments.filter((s) => s.endFrame !== null);
  }
}
