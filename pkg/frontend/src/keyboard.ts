/** Keyboard-first review: digits label, r rejects, u undoes, arrows move. */

import { NERVE_LABELS, REJECT_LABEL } from "./types.js";

export type Action =
  | { kind: "label"; label: string }
  | { kind: "undo" }
  | { kind: "next" }
  | { kind: "prev" };

export function actionForKey(key: string): Action | null {
  if (key.length === 1 && key >= "1" && key <= "8") {
    return { kind: "label", label: NERVE_LABELS[Number(key) - 1] };
  }
  switch (key) {
    case "r":
    case "R":
      return { kind: "label", label: REJECT_LABEL };
    case "u":
    case "U":
      return { kind: "undo" };
    case "ArrowRight":
    case "n":
      return { kind: "next" };
    case "ArrowLeft":
    case "p":
      return { kind: "prev" };
    default:
      return null;
  }
}
