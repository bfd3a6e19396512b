/** Polyline rendering of one cluster onto a 2D canvas surface. */

import { boundsOf, OrbitCamera } from "./camera.js";
import { cssColor, orientationColor } from "./color.js";
import type { Point3 } from "./types.js";

/** The slice of CanvasRenderingContext2D the renderer needs; easy to mock. */
export interface PolylineSurface {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
  textAlign: CanvasTextAlign;
  fillRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  stroke(): void;
  fillText(text: string, x: number, y: number): void;
}

export interface RenderStats {
  drawn: number;
  skipped: number;
  placeholder: boolean;
}

const BACKGROUND = "#101014";
const PLACEHOLDER_TEXT = "no geometry for this cluster";

export function renderPlaceholder(
  surface: PolylineSurface,
  width: number,
  height: number,
  text: string = PLACEHOLDER_TEXT,
): RenderStats {
  surface.fillStyle = BACKGROUND;
  surface.fillRect(0, 0, width, height);
  surface.fillStyle = "#9a9aa6";
  surface.font = "16px system-ui, sans-serif";
  surface.textAlign = "center";
  surface.fillText(text, width / 2, height / 2);
  return { drawn: 0, skipped: 0, placeholder: true };
}

/**
 * Project and stroke every fiber, back to front by mean depth, colored by
 * its own orientation.  Empty geometry renders a placeholder instead of
 * failing.
 */
export function renderCluster(
  surface: PolylineSurface,
  width: number,
  height: number,
  fibers: Point3[][],
  camera: OrbitCamera,
): RenderStats {
  const drawable = fibers.filter((fiber) => fiber.length >= 2);
  if (drawable.length === 0) return renderPlaceholder(surface, width, height);

  surface.fillStyle = BACKGROUND;
  surface.fillRect(0, 0, width, height);

  const projected = drawable.map((fiber) => {
    const points = fiber.map((p) => camera.project(p, width, height));
    let depthSum = 0;
    let visible = 0;
    for (const pt of points) {
      if (pt !== null) {
        depthSum += pt.depth;
        visible++;
      }
    }
    return { fiber, points, meanDepth: visible ? depthSum / visible : Infinity, visible };
  });
  projected.sort((a, b) => b.meanDepth - a.meanDepth);

  let drawn = 0;
  let skipped = 0;
  surface.lineWidth = 1.5;
  for (const { fiber, points, visible } of projected) {
    if (visible < 2) {
      skipped++;
      continue;
    }
    surface.strokeStyle = cssColor(orientationColor(fiber));
    surface.beginPath();
    let started = false;
    for (const pt of points) {
      if (pt === null) {
        started = false;
        continue;
      }
      if (started) {
        surface.lineTo(pt.x, pt.y);
      } else {
        surface.moveTo(pt.x, pt.y);
        started = true;
      }
    }
    surface.stroke();
    drawn++;
  }
  return { drawn, skipped, placeholder: false };
}

/** Frame the camera onto the fibers' bounding box; no-op for empty geometry. */
export function frameToFibers(camera: OrbitCamera, fibers: Point3[][], aspect: number): void {
  const bounds = boundsOf(fibers);
  if (bounds !== null) camera.frame(bounds, aspect);
}
