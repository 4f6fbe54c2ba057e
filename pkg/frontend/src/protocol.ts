// Wire protocol spoken with the streaming service (one JSON object per
// websocket frame), plus type guards for incoming messages.

export interface PromptMessage {
  type: "prompt";
  text: string;
  seed?: number;
}

export interface RecomposeMessage {
  type: "recompose";
  segment: number;
  text: string;
  seed?: number;
}

export type ClientMessage = PromptMessage | RecomposeMessage;

export interface SegmentStartMessage {
  type: "segment_start";
  session: number;
  segment: number;
  text: string;
  start_frame: number;
}

export interface FrameMessage {
  type: "frame";
  session: number;
  index: number;
  joints: number[][]; // 22 x [x, y, z] world positions, meters
  pose272: number[];
}

export interface SegmentEndMessage {
  type: "segment_end";
  session: number;
  segment: number;
  reason: "stop" | "max-length" | "interrupt";
  frames: number;
}

export interface ErrorMessage {
  type: "error";
  message: string;
}

export type ServerMessage =
  | SegmentStartMessage
  | FrameMessage
  | SegmentEndMessage
  | ErrorMessage;

export interface SkeletonDef {
  parents: number[];
  offsets: number[][];
}

const isNumberArray = (v: unknown): v is number[] =>
  Array.isArray(v) && v.every((x) => typeof x === "number" && Number.isFinite(x));

export function parseServerMessage(raw: string): ServerMessage | null {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof data !== "object" || data === null || !("type" in data)) return null;
  const msg = data as Record<string, unknown>;
  switch (msg.type) {
    case "segment_start":
      if (
        typeof msg.segment === "number" &&
        typeof msg.text === "string" &&
        typeof msg.start_frame === "number"
      )
        return msg as unknown as SegmentStartMessage;
      return null;
    case "frame":
      if (
        typeof msg.index === "number" &&
        Array.isArray(msg.joints) &&
        msg.joints.length > 0 &&
        msg.joints.every(isNumberArray) &&
        isNumberArray(msg.pose272)
      )
        return msg as unknown as FrameMessage;
      return null;
    case "segment_end":
      if (typeof msg.segment === "number" && typeof msg.frames === "number")
        return msg as unknown as SegmentEndMessage;
      return null;
    case "error":
      if (typeof msg.message === "string") return msg as unknown as ErrorMessage;
      return null;
    default:
      return null;
  }
}
