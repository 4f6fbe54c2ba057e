// Stick-figure rendering: a small orbit camera, perspective projection and
// canvas 2D bone drawing. Pure projection math lives here so it can be
// unit-tested without a DOM.

import type { SkeletonDef } from "./protocol.js";

export interface Camera {
  yaw: number; // radians around the +Y axis
  pitch: number; // radians above the horizon
  distance: number; // meters from target
  target: [number, number, number];
  fov: number; // vertical field of view, radians
}

export const defaultCamera = (): Camera => ({
  yaw: Math.PI / 4,
  pitch: 0.35,
  distance: 3.5,
  target: [0, 0.9, 0],
  fov: Math.PI / 4,
});

export interface Projected {
  x: number;
  y: number;
  depth: number;
}

/** Camera-space basis: right, up, forward (looking at the target). */
export function cameraBasis(cam: Camera): {
  eye: [number, number, number];
  right: [number, number, number];
  up: [number, number, number];
  forward: [number, number, number];
} {
  const cp = Math.cos(cam.pitch);
  const eye: [number, number, number] = [
    cam.target[0] + cam.distance * cp * Math.sin(cam.yaw),
    cam.target[1] + cam.distance * Math.sin(cam.pitch),
    cam.target[2] + cam.distance * cp * Math.cos(cam.yaw),
  ];
  const f: [number, number, number] = [
    cam.target[0] - eye[0],
    cam.target[1] - eye[1],
    cam.target[2] - eye[2],
  ];
  const fl = Math.hypot(...f);
  const forward: [number, number, number] = [f[0] / fl, f[1] / fl, f[2] / fl];
  // world up crossed with forward gives the right axis
  const right: [number, number, number] = [
    forward[2] === 0 && forward[0] === 0 ? 1 : -forward[2],
    0,
    forward[0] === 0 && forward[2] === 0 ? 0 : forward[0],
  ];
  const rl = Math.hypot(...right) || 1;
  right[0] /= rl;
  right[1] /= rl;
  right[2] /= rl;
  const up: [number, number, number] = [
    right[1] * forward[2] - right[2] * forward[1],
    right[2] * forward[0] - right[0] * forward[2],
    right[0] * forward[1] - right[1] * forward[0],
  ];
  return { eye, right, up, forward };
}

/** Perspective-project world points to pixel coordinates. */
export function project(
  points: number[][],
  cam: Camera,
  width: number,
  height: number
): Projected[] {
  const { eye, right, up, forward } = cameraBasis(cam);
  const scale = height / 2 / Math.tan(cam.fov / 2);
  return points.map((p) => {
    const d: [number, number, number] = [p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]];
    const cx = d[0] * right[0] + d[1] * right[1] + d[2] * right[2];
    const cy = d[0] * up[0] + d[1] * up[1] + d[2] * up[2];
    const cz = d[0] * forward[0] + d[1] * forward[1] + d[2] * forward[2];
    const depth = Math.max(cz, 1e-6);
    return {
      x: width / 2 + (cx / depth) * scale,
      y: height / 2 - (cy / depth) * scale,
      depth,
    };
  });
}

/** Bone list (child, parent) pairs derived from the skeleton definition. */
export function boneList(skeleton: SkeletonDef): Array<[number, number]> {
  const bones: Array<[number, number]> = [];
  skeleton.parents.forEach((parent, child) => {
    if (parent >= 0) bones.push([child, parent]);
  });
  return bones;
}

export function drawSkeleton(
  ctx: CanvasRenderingContext2D,
  joints: number[][],
  skeleton: SkeletonDef,
  cam: Camera,
  width: number,
  height: number,
  color = "#4ade80"
): void {
  const pts = project(joints, cam, width, height);
  ctx.strokeStyle = color;
  ctx.lineWidth = 2;
  for (const [child, parent] of boneList(skeleton)) {
    ctx.beginPath();
    ctx.moveTo(pts[parent].x, pts[parent].y);
    ctx.lineTo(pts[child].x, pts[child].y);
    ctx.stroke();
  }
  ctx.fillStyle = color;
  for (const p of pts) {
    ctx.beginPath();
    ctx.arc(p.x, p.y, 3, 0, 2 * Math.PI);
    ctx.fill();
  }
}

/** Ground grid centered under the camera target. */
export function drawGround(
  ctx: CanvasRenderingContext2D,
  cam: Camera,
  width: number,
  height: number,
  extent = 3,
  step = 0.5
): void {
  ctx.strokeStyle = "#2a2f3a";
  ctx.lineWidth = 1;
  const cxz = [Math.round(cam.target[0] / step) * step, Math.round(cam.target[2] / step) * step];
  for (let i = -extent; i <= extent + 1e-9; i += step) {
    const a = project(
      [
        [cxz[0] + i, 0, cxz[1] - extent],
        [cxz[0] + i, 0, cxz[1] + extent],
        [cxz[0] - extent, 0, cxz[1] + i],
        [cxz[0] + extent, 0, cxz[1] + i],
      ],
      cam,
      width,
      height
    );
    ctx.beginPath();
    ctx.moveTo(a[0].x, a[0].y);
    ctx.lineTo(a[1].x, a[1].y);
    ctx.moveTo(a[2].x, a[2].y);
    ctx.lineTo(a[3].x, a[3].y);
    ctx.stroke();
  }
}
