/** Perspective orbit camera: spherical eye around a target, auto-framing. */

import type { Point3 } from "./types.js";

export interface Bounds {
  min: Point3;
  max: Point3;
}

export function boundsOf(fibers: Point3[][]): Bounds | null {
  const min: Point3 = [Infinity, Infinity, Infinity];
  const max: Point3 = [-Infinity, -Infinity, -Infinity];
  let found = false;
  for (const fiber of fibers) {
    for (const p of fiber) {
      found = true;
      for (let axis = 0; axis < 3; axis++) {
        if (p[axis] < min[axis]) min[axis] = p[axis];
        if (p[axis] > max[axis]) max[axis] = p[axis];
      }
    }
  }
  return found ? { min, max } : null;
}

export interface Projected {
  x: number;
  y: number;
  /** Distance along the view axis; larger is farther from the eye. */
  depth: number;
}

const MAX_PITCH = 1.5; // radians, keeps the view basis away from the poles
const NEAR = 0.1;
const FRAME_MARGIN = 1.05;

export class OrbitCamera {
  target: Point3 = [0, 0, 0];
  distance = 100;
  yaw = 0;
  pitch = 0;
  readonly fovDeg = 45;
  private zoomMin = 1;
  private zoomMax = 10_000;

  orbit(dYaw: number, dPitch: number): void {
    this.yaw += dYaw;
    this.pitch = Math.min(MAX_PITCH, Math.max(-MAX_PITCH, this.pitch + dPitch));
  }

  zoom(factor: number): void {
    this.distance = Math.min(this.zoomMax, Math.max(this.zoomMin, this.distance * factor));
  }

  /**
   * Center on the bounds and back off until the whole bounding sphere fits
   * the frustum for the given viewport aspect, with a small margin.  The
   * fit is rotation-invariant, so later orbiting keeps every point on
   * screen at this distance.
   */
  frame(bounds: Bounds, aspect: number): void {
    const center: Point3 = [
      (bounds.min[0] + bounds.max[0]) / 2,
      (bounds.min[1] + bounds.max[1]) / 2,
      (bounds.min[2] + bounds.max[2]) / 2,
    ];
    const radius =
      Math.hypot(
        bounds.max[0] - bounds.min[0],
        bounds.max[1] - bounds.min[1],
        bounds.max[2] - bounds.min[2],
      ) / 2;
    const halfV = (this.fovDeg * Math.PI) / 360;
    const halfH = Math.atan(Math.tan(halfV) * Math.max(aspect, 1e-6));
    const half = Math.min(halfV, halfH);
    this.target = center;
    this.distance = Math.max(10, (radius / Math.sin(half)) * FRAME_MARGIN);
    this.zoomMin = Math.max(NEAR * 10, radius * 0.05, 1);
    this.zoomMax = this.distance * 20;
  }

  private eyeAndBasis(): { eye: Point3; right: Point3; up: Point3; back: Point3 } {
    const cp = Math.cos(this.pitch);
    const back: Point3 = [
      cp * Math.sin(this.yaw),
      Math.sin(this.pitch),
      cp * Math.cos(this.yaw),
    ];
    const eye: Point3 = [
      this.target[0] + this.distance * back[0],
      this.target[1] + this.distance * back[1],
      this.target[2] + this.distance * back[2],
    ];
    // world up crossed with the view axis; pitch clamp keeps this non-zero
    let rx = -back[2];
    let rz = back[0];
    const rn = Math.hypot(rx, rz);
    rx /= rn;
    rz /= rn;
    const right: Point3 = [rx, 0, rz];
    // up = back x right, written out with right.y = 0
    const up: Point3 = [back[1] * rz, back[2] * rx - back[0] * rz, -back[1] * rx];
    return { eye, right, up, back };
  }

  /** Screen position of a world point, or null when behind the eye. */
  project(p: Point3, width: number, height: number): Projected | null {
    const { eye, right, up, back } = this.eyeAndBasis();
    const dx = p[0] - eye[0];
    const dy = p[1] - eye[1];
    const dz = p[2] - eye[2];
    const cx = dx * right[0] + dy * right[1] + dz * right[2];
    const cy = dx * up[0] + dy * up[1] + dz * up[2];
    const cz = dx * back[0] + dy * back[1] + dz * back[2];
    const depth = -cz; // points in front of the eye have negative cz
    if (depth < NEAR) return null;
    const f = height / 2 / Math.tan((this.fovDeg * Math.PI) / 360);
    return {
      x: width / 2 + (f * cx) / depth,
      y: height / 2 - (f * cy) / depth,
      depth,
    };
  }
}
