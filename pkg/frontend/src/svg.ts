/** Tiny deterministic SVG builder: fixed canvas, linear scales, no timestamps. */

export const WIDTH = 640;
export const HEIGHT = 480;
export const MARGIN = { top: 24, right: 20, bottom: 46, left: 62 };

export interface Scale {
  (v: number): number;
  domain: [number, number];
}

export function linearScale(domain: [number, number], range: [number, number]): Scale {
  const [d0, d1] = domain;
  const [r0, r1] = range;
  const span = d1 - d0 || 1;
  const fn = ((v: number) => r0 + ((v - d0) / span) * (r1 - r0)) as Scale;
  fn.domain = domain;
  return fn;
}

export function padDomain(lo: number, hi: number, frac = 0.08): [number, number] {
  if (!(isFinite(lo) && isFinite(hi))) throw new Error("cannot scale non-finite domain");
  const pad = (hi - lo || 1) * frac;
  return [lo - pad, hi + pad];
}

export function fmt(v: number): string {
  if (!isFinite(v)) throw new Error(`non-finite coordinate ${v} in figure`);
  const s = v.toPrecision(8);
  return s.includes(".") ? s.replace(/\.?0+$/, "").replace(/\.?0+e/, "e") : s;
}

export function ticks(lo: number, hi: number, n = 5): number[] {
  const out: number[] = [];
  for (let i = 0; i <= n; i++) out.push(lo + ((hi - lo) * i) / n);
  return out;
}

export function axes(x: Scale, y: Scale, xLabel: string, yLabel: string): string {
  const x0 = MARGIN.left;
  const x1 = WIDTH - MARGIN.right;
  const y0 = HEIGHT - MARGIN.bottom;
  const y1 = MARGIN.top;
  const parts: string[] = [
    `<line x1="${x0}" y1="${y0}" x2="${x1}" y2="${y0}" stroke="black"/>`,
    `<line x1="${x0}" y1="${y0}" x2="${x0}" y2="${y1}" stroke="black"/>`,
  ];
  for (const t of ticks(x.domain[0], x.domain[1])) {
    const px = x(t);
    parts.push(`<line x1="${fmt(px)}" y1="${y0}" x2="${fmt(px)}" y2="${y0 + 5}" stroke="black"/>`);
    parts.push(
      `<text x="${fmt(px)}" y="${y0 + 18}" font-size="11" text-anchor="middle">${Number(t.toPrecision(3))}</text>`,
    );
  }
  for (const t of ticks(y.domain[0], y.domain[1])) {
    const py = y(t);
    parts.push(`<line x1="${x0 - 5}" y1="${fmt(py)}" x2="${x0}" y2="${fmt(py)}" stroke="black"/>`);
    parts.push(
      `<text x="${x0 - 8}" y="${fmt(py + 4)}" font-size="11" text-anchor="end">${Number(t.toPrecision(3))}</text>`,
    );
  }
  parts.push(
    `<text x="${(x0 + x1) / 2}" y="${HEIGHT - 10}" font-size="13" text-anchor="middle">${xLabel}</text>`,
  );
  parts.push(
    `<text x="16" y="${(y0 + y1) / 2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 ${(y0 + y1) / 2})">${yLabel}</text>`,
  );
  return parts.join("\n");
}

export function svgDocument(body: string, title: string): string {
  return [
    `<svg xmlns="http://www.w3.org/2000/svg" width="${WIDTH}" height="${HEIGHT}" viewBox="0 0 ${WIDTH} ${HEIGHT}">`,
    `<rect width="${WIDTH}" height="${HEIGHT}" fill="white"/>`,
    `<title>${title}</title>`,
    body,
    `</svg>`,
  ].join("\n");
}

export function plotArea(): { x: [number, number]; y: [number, number] } {
  return {
    x: [MARGIN.left, WIDTH - MARGIN.right],
    y: [HEIGHT - MARGIN.bottom, MARGIN.top],
  };
}
