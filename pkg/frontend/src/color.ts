/** Per-fiber color from local orientation: |dx|, |dy|, |dz| normalized to RGB. */

import type { Point3 } from "./types.js";

export type Rgb = [number, number, number];

const NEUTRAL: Rgb = [128, 128, 128];

/**
 * Mean absolute segment direction of a polyline, normalized and scaled so a
 * perfectly axis-aligned fiber saturates exactly one channel.
 */
export function orientationColor(points: Point3[]): Rgb {
  if (points.length < 2) return NEUTRAL;
  let ax = 0;
  let ay = 0;
  let az = 0;
  for (let i = 1; i < points.length; i++) {
    ax += Math.abs(points[i][0] - points[i - 1][0]);
    ay += Math.abs(points[i][1] - points[i - 1][1]);
    az += Math.abs(points[i][2] - points[i - 1][2]);
  }
  const norm = Math.hypot(ax, ay, az);
  if (norm === 0) return NEUTRAL;
  return [
    Math.round((255 * ax) / norm),
    Math.round((255 * ay) / norm),
    Math.round((255 * az) / norm),
  ];
}

export function cssColor(rgb: Rgb): string {
  return `rgb(${rgb[0]}, ${rgb[1]}, ${rgb[2]})`;
}
