/**
 * Fixed part-color palette indexed by vocabulary order, matching the
 * server-side explanation legend so a part keeps one color everywhere.
 */

const PALETTE = [
  "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4",
  "#46f0f0", "#f032e6", "#bcf60c", "#fabebe", "#008080", "#e6beff",
  "#9a6324", "#fffac8", "#800000", "#aaffc3",
];

export function partColor(partIndex: number): string {
  return PALETTE[partIndex % PALETTE.length] as string;
}

export function colorsFor(parts: string[]): Map<string, string> {
  return new Map(parts.map((p, i) => [p, partColor(i)]));
}
