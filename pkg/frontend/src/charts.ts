/** Tiny dependency-free SVG line charts. */

export interface Point {
  index: number;
  value: number;
}

interface Series {
  label: string;
  color: string;
  points: Point[];
  dots?: boolean;
}

const WIDTH = 360;
const HEIGHT = 140;
const PAD = 24;

function scale(points: Point[][]): { x: (i: number) => number; y: (v: number) => number } {
  const all = points.flat();
  const maxIndex = Math.max(1, ...all.map((p) => p.index));
  const maxValue = Math.max(1e-9, ...all.map((p) => p.value));
  const minValue = Math.min(0, ...all.map((p) => p.value));
  const span = maxValue - minValue || 1;
  return {
    x: (i) => PAD + (i / maxIndex) * (WIDTH - 2 * PAD),
    y: (v) => HEIGHT - PAD - ((v - minValue) / span) * (HEIGHT - 2 * PAD),
  };
}

export function renderLineChart(title: string, series: Series[]): string {
  const nonEmpty = series.filter((s) => s.points.length > 0);
  if (nonEmpty.length === 0) {
    return `<svg viewBox="0 0 ${WIDTH} ${HEIGHT}" class="chart"><text x="${WIDTH / 2}" y="${
      HEIGHT / 2
    }" text-anchor="middle" class="chart-empty">${title}: no data yet</text></svg>`;
  }
  const { x, y } = scale(nonEmpty.map((s) => s.points));
  const parts: string[] = [];
  parts.push(
    `<line x1="${PAD}" y1="${HEIGHT - PAD}" x2="${WIDTH - PAD}" y2="${HEIGHT - PAD}" class="axis"/>`,
    `<line x1="${PAD}" y1="${PAD}" x2="${PAD}" y2="${HEIGHT - PAD}" class="axis"/>`,
  );
  nonEmpty.forEach((s) => {
    if (s.points.length > 1 && !s.dots) {
      const path = s.points.map((p) => `${x(p.index).toFixed(1)},${y(p.value).toFixed(1)}`).join(" ");
      parts.push(`<polyline points="${path}" fill="none" stroke="${s.color}" stroke-width="2"/>`);
    }
    s.points.forEach((p) => {
      parts.push(
        `<circle cx="${x(p.index).toFixed(1)}" cy="${y(p.value).toFixed(1)}" r="3" fill="${s.color}"/>`,
      );
    });
  });
  const legend = series
    .map(
      (s, i) =>
        `<text x="${PAD + i * 110}" y="14" fill="${s.color}" class="legend">${s.label}</text>`,
    )
    .join("");
  return `<svg viewBox="0 0 ${WIDTH} ${HEIGHT}" class="chart" role="img" aria-label="${title}">${legend}${parts.join("")}</svg>`;
}

export function workloadChart(predicted: number[], reported: Point[]): string {
  return renderLineChart("workload", [
    {
      label: "predicted WL",
      color: "#4cc2ff",
      points: predicted.map((v, i) => ({ index: i, value: v })),
    },
    { label: "reported", color: "#ffb454", points: reported, dots: true },
  ]);
}

export function gapChart(gaps: Point[], thresholds: Point[]): string {
  return renderLineChart("gap vs threshold", [
    { label: "gap G", color: "#9f7cff", points: gaps, dots: true },
    { label: "w × f", color: "#57d98f", points: thresholds, dots: true },
  ]);
}
