// Keyboard shortcuts: digits 1-4 pick a label, Enter submits, L locks the
// finished round.

export type KeyAction =
  | { kind: "select"; index: number }
  | { kind: "submit" }
  | { kind: "lock" }
  | { kind: "none" };

export function keyToAction(key: string): KeyAction {
  if (/^[1-4]$/.test(key)) {
    return { kind: "select", index: Number.parseInt(key, 10) - 1 };
  }
  if (key === "Enter") return { kind: "submit" };
  if (key === "l" || key === "L") return { kind: "lock" };
  return { kind: "none" };
}
