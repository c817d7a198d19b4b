//! Scanline-union silhouette rasteriser.
//!
//! Every clipped, projected polygon is cut by horizontal sample lines; the
//! resulting x-intervals of one line are merged into their union before any
//! coverage is computed, so shared internal edges leave no seams and the
//! result does not depend on triangle order. Along x the union is convolved
//! with a smoothstep kernel of width τ; along y each pixel row is sampled by
//! a handful of Gauss-Legendre lines. Only the surviving union endpoints
//! carry gradient, which keeps the backward pass cheap.

use crate::dual::{Dual, Grad, Scalar, NPARAM};

pub(crate) const MAX_POLY: usize = 6;

#[derive(Clone, Copy)]
pub(crate) struct Poly {
    pub idx: [u32; MAX_POLY],
    pub len: u8,
}

/// Clip-space vertex.
pub(crate) type Clip<T> = [T; 4];

#[derive(Clone, Copy, Debug)]
struct EdgeRef {
    poly: u32,
    edge: u8,
}

#[derive(Clone, Copy, Debug)]
struct Span {
    a: f64,
    b: f64,
    ea: EdgeRef,
    eb: EdgeRef,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EndpointSample {
    row: u32,
    y: f64,
    x: f64,
    weight: f64,
    sign: f64,
    edge: EdgeRef,
}

/// Projected geometry ready for scan conversion.
pub(crate) struct Projected<T> {
    pub px: Vec<[T; 2]>,
    pub polys: Vec<Poly>,
}

/// Near/far clipping in clip space followed by the viewport transform.
pub(crate) fn project<T: Scalar>(clip: &[Clip<T>], faces: &[[u32; 3]], width: usize, height: usize) -> Projected<T> {
    let (w, h) = (width as f64, height as f64);
    let to_px = |c: &Clip<T>| -> [T; 2] {
        let iw = T::constant(1.0) / c[3];
        [(c[0] * iw + T::constant(1.0)) * (0.5 * w), (c[1] * iw + T::constant(1.0)) * (0.5 * h)]
    };
    let vals: Vec<[f64; 4]> = clip.iter().map(|c| c.map(|x| x.value())).collect();
    let ok: Vec<bool> = vals.iter().map(|c| plane_dist(c, 0) >= 0.0 && plane_dist(c, 1) >= 0.0).collect();
    let mut px: Vec<[T; 2]> = clip
        .iter()
        .zip(&ok)
        .map(|(c, &ok)| if ok { to_px(c) } else { [T::constant(0.0); 2] })
        .collect();
    let mut polys = Vec::with_capacity(faces.len());
    for f in faces {
        let fi = f.map(|i| i as usize);
        if fi.iter().all(|&i| ok[i]) {
            let mut idx = [0u32; MAX_POLY];
            idx[..3].copy_from_slice(f);
            polys.push(Poly { idx, len: 3 });
            continue;
        }
        if (0..2).any(|p| fi.iter().all(|&i| plane_dist(&vals[i], p) < 0.0)) {
            continue;
        }
        // Sutherland-Hodgman against the two depth planes
        let mut poly: Vec<Clip<T>> = fi.iter().map(|&i| clip[i]).collect();
        for plane in 0..2 {
            let mut out = Vec::with_capacity(poly.len() + 1);
            for k in 0..poly.len() {
                let (p, q) = (poly[k], poly[(k + 1) % poly.len()]);
                let (dp, dq) = (plane_dist(&p.map(|x| x.value()), plane), plane_dist(&q.map(|x| x.value()), plane));
                if dp >= 0.0 {
                    out.push(p);
                }
                if (dp >= 0.0) != (dq >= 0.0) {
                    let (sp, sq) = (plane_dist(&p, plane), plane_dist(&q, plane));
                    let s = sp / (sp - sq);
                    out.push([0, 1, 2, 3].map(|j| p[j] + (q[j] - p[j]) * s));
                }
            }
            poly = out;
            if poly.len() < 3 {
                break;
            }
        }
        if poly.len() < 3 {
            continue;
        }
        let mut idx = [0u32; MAX_POLY];
        for (k, c) in poly.iter().take(MAX_POLY).enumerate() {
            idx[k] = px.len() as u32;
            px.push(to_px(c));
        }
        polys.push(Poly {
            idx,
            len: poly.len().min(MAX_POLY) as u8,
        });
    }
    Projected { px, polys }
}

/// Signed distance to the near (z + w >= 0) or far (w - z >= 0) plane.
fn plane_dist<T: Scalar>(c: &Clip<T>, plane: usize) -> T {
    if plane == 0 {
        c[2] + c[3]
    } else {
        c[3] - c[2]
    }
}

/// Smoothstep CDF over a window of unit width centred on zero.
#[inline]
fn step(z: f64) -> f64 {
    let s = (z + 0.5).clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Derivative of [`step`].
#[inline]
fn kernel(z: f64) -> f64 {
    let s = z + 0.5;
    if (0.0..=1.0).contains(&s) {
        6.0 * s * (1.0 - s)
    } else {
        0.0
    }
}

/// Offsets within a pixel row and weights summing to one.
pub(crate) fn row_nodes(n: usize) -> Vec<(f64, f64)> {
    // Gauss-Legendre on [-1, 1], mapped to [-1/2, 1/2]
    let table: &[(f64, f64)] = match n {
        0 | 1 => &[(0.0, 2.0)],
        2 => &[(-0.577_350_269_189_625_8, 1.0), (0.577_350_269_189_625_8, 1.0)],
        3 => &[(-0.774_596_669_241_483_4, 0.555_555_555_555_555_6), (0.0, 0.888_888_888_888_888_9), (0.774_596_669_241_483_4, 0.555_555_555_555_555_6)],
        _ => &[
            (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
            (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
            (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
            (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
        ],
    };
    table.iter().map(|&(x, w)| (0.5 * x, 0.5 * w)).collect()
}

pub(crate) struct Raster {
    pub coverage: Vec<f64>,
    samples: Vec<EndpointSample>,
}

fn ordered(p: [f64; 2], q: [f64; 2]) -> bool {
    (p[1], p[0]) <= (q[1], q[0])
}

/// x where the edge p→q meets line y, computed from a canonical vertex order.
#[inline]
fn crossing(p: [f64; 2], q: [f64; 2], y: f64) -> f64 {
    let (p, q) = if ordered(p, q) { (p, q) } else { (q, p) };
    p[0] + (y - p[1]) * (q[0] - p[0]) / (q[1] - p[1])
}

/// Horizontal run of fully covered pixels `[start, end)` in one row (hard mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRun {
    pub row: u32,
    pub start: u32,
    pub end: u32,
}

/// Intersect every polygon with every sample line and hand each line's sorted
/// union of spans to `emit(line, union)`.
fn line_unions(
    px: &[[f64; 2]],
    polys: &[Poly],
    width: usize,
    height: usize,
    margin: f64,
    nodes: &[(f64, f64)],
    mut emit: impl FnMut(usize, &[Span]),
) {
    let nn = nodes.len();
    let lines = height * nn;
    let line_y = |l: usize| (l / nn) as f64 + 0.5 + nodes[l % nn].0;

    // pass 1: per-polygon line ranges; bucket counts
    let mut ranges: Vec<(usize, usize)> = Vec::with_capacity(polys.len());
    let mut start = vec![0usize; lines + 1];
    for p in polys {
        let verts = &p.idx[..p.len as usize];
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &i in verts {
            let [u, v] = px[i as usize];
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        if !(umax >= -margin && umin <= width as f64 + margin && vmax >= 0.0 && vmin <= height as f64) || !(vmax > vmin) {
            ranges.push((0, 0));
            continue;
        }
        // candidate lines, widened by one row either side and then tested exactly
        let r0 = ((vmin - 1.0).floor().max(0.0)) as usize;
        let r1 = ((vmax + 1.0).ceil().max(0.0) as usize).min(height);
        let mut l0 = r0 * nn;
        let mut l1 = r1 * nn;
        while l0 < l1 && line_y(l0) < vmin {
            l0 += 1;
        }
        while l1 > l0 && line_y(l1 - 1) >= vmax {
            l1 -= 1;
        }
        ranges.push((l0, l1));
        for c in &mut start[l0 + 1..l1 + 1] {
            *c += 1;
        }
    }
    for l in 0..lines {
        start[l + 1] += start[l];
    }
    let placeholder = Span {
        a: 0.0,
        b: 0.0,
        ea: EdgeRef { poly: 0, edge: 0 },
        eb: EdgeRef { poly: 0, edge: 0 },
    };
    let mut spans = vec![placeholder; start[lines]];
    let mut used = vec![0usize; lines];

    // pass 2: polygon/line intersections
    for (pi, (p, &(l0, l1))) in polys.iter().zip(&ranges).enumerate() {
        let n = p.len as usize;
        for l in l0..l1 {
            let y = line_y(l);
            let (mut a, mut b) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut ea, mut eb) = (0u8, 0u8);
            for e in 0..n {
                let pv = px[p.idx[e] as usize];
                let qv = px[p.idx[(e + 1) % n] as usize];
                if (pv[1] <= y) != (qv[1] <= y) {
                    let x = crossing(pv, qv, y);
                    if x < a {
                        a = x;
                        ea = e as u8;
                    }
                    if x > b {
                        b = x;
                        eb = e as u8;
                    }
                }
            }
            if a < b {
                spans[start[l] + used[l]] = Span {
                    a,
                    b,
                    ea: EdgeRef { poly: pi as u32, edge: ea },
                    eb: EdgeRef { poly: pi as u32, edge: eb },
                };
                used[l] += 1;
            }
        }
    }

    // pass 3: per-line union
    let mut union: Vec<Span> = Vec::new();
    for l in 0..lines {
        let bucket = &mut spans[start[l]..start[l] + used[l]];
        if bucket.is_empty() {
            continue;
        }
        bucket.sort_unstable_by(|s, t| s.a.total_cmp(&t.a).then(s.b.total_cmp(&t.b)));
        union.clear();
        let mut cur = bucket[0];
        for s in bucket.iter().skip(1) {
            if s.a <= cur.b {
                if s.b > cur.b {
                    cur.b = s.b;
                    cur.eb = s.eb;
                }
            } else {
                union.push(cur);
                cur = *s;
            }
        }
        union.push(cur);
        emit(l, &union);
    }
}

/// Hard coverage as pixel runs: pixel i of row r is on iff its centre lies inside the union.
pub(crate) fn hard_runs(px: &[[f64; 2]], polys: &[Poly], width: usize, height: usize) -> Vec<PixelRun> {
    let mut runs = Vec::new();
    line_unions(px, polys, width, height, 0.0, &[(0.0, 1.0)], |row, union| {
        for s in union {
            let i0 = (s.a - 0.5).ceil().max(0.0) as usize;
            let i1 = ((s.b - 0.5).ceil().max(0.0) as usize).min(width);
            if i0 < i1 {
                runs.push(PixelRun {
                    row: row as u32,
                    start: i0 as u32,
                    end: i1 as u32,
                });
            }
        }
    });
    runs
}

pub(crate) fn rasterize(
    px: &[[f64; 2]],
    polys: &[Poly],
    width: usize,
    height: usize,
    softness: f64,
    nodes: &[(f64, f64)],
    record: bool,
) -> Raster {
    let mut coverage = vec![0.0; width * height];
    if softness <= 0.0 {
        for r in hard_runs(px, polys, width, height) {
            let row = r.row as usize * width;
            coverage[row + r.start as usize..row + r.end as usize].fill(1.0);
        }
        return Raster { coverage, samples: Vec::new() };
    }
    let nn = nodes.len();
    let margin = 0.5 * softness;
    let tau = softness;
    let mut samples = Vec::new();
    line_unions(px, polys, width, height, margin, nodes, |l, union| {
        let row = l / nn;
        let (dy, weight) = nodes[l % nn];
        let out = &mut coverage[row * width..(row + 1) * width];
        for s in union {
            let lo = ((s.a - margin - 0.5).floor().max(0.0)) as usize;
            let hi = (((s.b + margin - 0.5).ceil() + 1.0).max(0.0) as usize).min(width);
            // pixels whose centre is at least τ/2 inside both ends get exactly `weight`
            let in0 = ((s.a + margin - 0.5).ceil().max(lo as f64) as usize).min(hi);
            let in1 = (((s.b - margin - 0.5).floor() + 1.0).max(in0 as f64) as usize).min(hi);
            let edge = |i: usize| {
                let x = i as f64 + 0.5;
                weight * (step((x - s.a) / tau) - step((x - s.b) / tau))
            };
            for i in lo..in0 {
                out[i] += edge(i);
            }
            for c in &mut out[in0..in1] {
                *c += weight;
            }
            for i in in1..hi {
                out[i] += edge(i);
            }
            if record {
                let y = row as f64 + 0.5 + dy;
                samples.push(EndpointSample { row: row as u32, y, x: s.a, weight, sign: -1.0, edge: s.ea });
                samples.push(EndpointSample { row: row as u32, y, x: s.b, weight, sign: 1.0, edge: s.eb });
            }
        }
    });
    for c in &mut coverage {
        *c = c.clamp(0.0, 1.0);
    }
    Raster { coverage, samples }
}

/// Gradient of a scalar with per-pixel sensitivity `g` through the recorded union endpoints.
pub(crate) fn backprop(
    raster: &Raster,
    px: &[[Dual; 2]],
    polys: &[Poly],
    width: usize,
    softness: f64,
    g: &[f64],
) -> Grad {
    let tau = softness;
    let mut grad = [0.0; NPARAM];
    for s in &raster.samples {
        let row = &g[s.row as usize * width..(s.row as usize + 1) * width];
        let lo = ((s.x - 0.5 * tau - 0.5).floor().max(0.0)) as usize;
        let hi = (((s.x + 0.5 * tau - 0.5).ceil() + 1.0).max(0.0) as usize).min(width);
        let mut acc = 0.0;
        for (i, gi) in row.iter().enumerate().take(hi).skip(lo) {
            if *gi != 0.0 {
                acc += gi * kernel((i as f64 + 0.5 - s.x) / tau);
            }
        }
        if acc == 0.0 {
            continue;
        }
        // d coverage / d endpoint = sign * weight * K / τ
        let dl_dx = s.sign * s.weight * acc / tau;
        let p = &polys[s.edge.poly as usize];
        let n = p.len as usize;
        let e = s.edge.edge as usize;
        let (pd, qd) = (px[p.idx[e] as usize], px[p.idx[(e + 1) % n] as usize]);
        let (pd, qd) = if ordered([pd[0].v, pd[1].v], [qd[0].v, qd[1].v]) { (pd, qd) } else { (qd, pd) };
        let y = Dual::constant(s.y);
        let x = pd[0] + (y - pd[1]) * (qd[0] - pd[0]) / (qd[1] - pd[1]);
        for (gk, xk) in grad.iter_mut().zip(x.g) {
            *gk += dl_dx * xk;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_derivative_of_step() {
        for k in -10..=10 {
            let z = k as f64 * 0.07;
            let h = 1e-6;
            let fd = (step(z + h) - step(z - h)) / (2.0 * h);
            assert!((fd - kernel(z)).abs() < 1e-6);
        }
        let total: f64 = row_nodes(4).iter().map(|n| n.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_triangles_of_a_square_leave_no_seam() {
        let px = vec![[2.0, 2.0], [12.0, 2.0], [12.0, 12.0], [2.0, 12.0]];
        let mut a = [0u32; MAX_POLY];
        a[..3].copy_from_slice(&[0, 1, 2]);
        let mut b = [0u32; MAX_POLY];
        b[..3].copy_from_slice(&[0, 2, 3]);
        let polys = [Poly { idx: a, len: 3 }, Poly { idx: b, len: 3 }];
        let r = rasterize(&px, &polys, 16, 16, 1.5, &row_nodes(4), false);
        for y in 4..10 {
            for x in 4..10 {
                assert!((r.coverage[y * 16 + x] - 1.0).abs() < 1e-12, "({x},{y})");
            }
        }
        let hard = rasterize(&px, &polys, 16, 16, 0.0, &row_nodes(4), false);
        let on = hard.coverage.iter().filter(|&&c| c == 1.0).count();
        assert_eq!(on, 100);
    }
}
