//! Gradient-domain compositing on the 5-point Laplacian.
//!
//! Unknowns are the pixels of `region`. For every unknown `p` and every
//! in-image 4-neighbor `q` the discrete equation is
//! `Σ_q (f_p - f_q) = Σ_q v_pq`, where `v_pq` is the guidance difference along
//! the edge and `f_q` is a Dirichlet value when `q` lies outside the region.
//! Neighbors outside the image are dropped, which mirrors the field at the
//! border. The system is symmetric positive definite as long as every
//! connected component of the region touches at least one Dirichlet pixel.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::raster::{Mask, ScalarField};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;

/// Target forward differences `gx = f(x+1, y) - f(x, y)` and
/// `gy = f(x, y+1) - f(x, y)` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceField {
    width: usize,
    height: usize,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

impl GuidanceField {
    pub fn zero(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            gx: vec![0.0; width * height],
            gy: vec![0.0; width * height],
        }
    }

    /// Forward differences of `field`; zero on the last column / row.
    pub fn gradient_of(field: &ScalarField) -> Self {
        let (w, h) = (field.width(), field.height());
        let mut g = Self::zero(w, h);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let f = field.get(x, y) as f64;
                if x + 1 < w {
                    g.gx[i] = field.get(x + 1, y) as f64 - f;
                }
                if y + 1 < h {
                    g.gy[i] = field.get(x, y + 1) as f64 - f;
                }
            }
        }
        g
    }

    pub fn from_components(width: usize, height: usize, gx: Vec<f64>, gy: Vec<f64>) -> Result<Self> {
        if gx.len() != width * height || gy.len() != width * height {
            return Err(Error::InvalidSize("guidance components do not match grid".into()));
        }
        Ok(Self { width, height, gx, gy })
    }
}

#[derive(Debug, Clone)]
pub struct PoissonProblem {
    pub region: Mask,
    pub guidance: GuidanceField,
    /// Dirichlet values outside the region; values inside are the initial guess.
    pub boundary: ScalarField,
}

#[derive(Debug, Clone)]
pub struct PoissonSolution {
    pub field: ScalarField,
    pub iterations: usize,
    pub relative_residual: f64,
    /// Relative residual after each iteration, starting with the initial guess.
    pub residual_history: Vec<f64>,
}

/// Assembled masked system in index space.
struct System {
    width: usize,
    /// Pixel index of each unknown.
    pixels: Vec<usize>,
    /// Unknown index of each pixel, `usize::MAX` outside the region.
    index: Vec<usize>,
    /// Number of in-image neighbors.
    diag: Vec<f64>,
    /// In-region neighbors per unknown.
    neighbors: Vec<[usize; 4]>,
    rhs: Vec<f64>,
}

const NONE: usize = usize::MAX;

fn in_image_neighbors(i: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, Edge)> {
    let (x, y) = (i % w, i / w);
    let mut out: [(usize, Edge); 4] = [(NONE, Edge::Right); 4];
    let mut k = 0;
    if x + 1 < w {
        out[k] = (i + 1, Edge::Right);
        k += 1;
    }
    if x > 0 {
        out[k] = (i - 1, Edge::Left);
        k += 1;
    }
    if y + 1 < h {
        out[k] = (i + w, Edge::Down);
        k += 1;
    }
    if y > 0 {
        out[k] = (i - w, Edge::Up);
        k += 1;
    }
    out.into_iter().take(k)
}

#[derive(Debug, Clone, Copy)]
enum Edge {
    Right,
    Left,
    Down,
    Up,
}

impl System {
    fn assemble(problem: &PoissonProblem) -> Result<Self> {
        let region = &problem.region;
        let (w, h) = (region.width(), region.height());
        if !region.same_size(&problem.boundary) || problem.guidance.width != w || problem.guidance.height != h {
            return Err(Error::ShapeMismatch("poisson inputs differ in size".into()));
        }
        let mut index = vec![NONE; w * h];
        let mut pixels = Vec::new();
        for (i, slot) in index.iter_mut().enumerate() {
            if region.at(i) {
                *slot = pixels.len();
                pixels.push(i);
            }
        }
        let g = &problem.guidance;
        let bnd = problem.boundary.data();
        let mut diag = Vec::with_capacity(pixels.len());
        let mut neighbors = Vec::with_capacity(pixels.len());
        let mut rhs = Vec::with_capacity(pixels.len());
        for &p in &pixels {
            let mut d = 0.0;
            let mut nb = [NONE; 4];
            let mut b = 0.0;
            for (k, (q, edge)) in in_image_neighbors(p, w, h).enumerate() {
                d += 1.0;
                // desired f_p - f_q
                b += match edge {
                    Edge::Right => -g.gx[p],
                    Edge::Left => g.gx[q],
                    Edge::Down => -g.gy[p],
                    Edge::Up => g.gy[q],
                };
                if index[q] == NONE {
                    b += bnd[q] as f64;
                } else {
                    nb[k] = index[q];
                }
            }
            diag.push(d);
            neighbors.push(nb);
            rhs.push(b);
        }
        let sys = Self {
            width: w,
            pixels,
            index,
            diag,
            neighbors,
            rhs,
        };
        sys.check_anchored(h)?;
        Ok(sys)
    }

    /// Every connected component needs a Dirichlet neighbor.
    fn check_anchored(&self, h: usize) -> Result<()> {
        let w = self.width;
        let mut seen = vec![false; self.pixels.len()];
        for start in 0..self.pixels.len() {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            let mut anchored = false;
            while let Some(u) = queue.pop_front() {
                for (q, _) in in_image_neighbors(self.pixels[u], w, h) {
                    match self.index[q] {
                        NONE => anchored = true,
                        v if !seen[v] => {
                            seen[v] = true;
                            queue.push_back(v);
                        }
                        _ => {}
                    }
                }
            }
            if !anchored {
                let p = self.pixels[start];
                return Err(Error::UnanchoredRegion(format!(
                    "component containing pixel ({}, {}) has no pixel outside the region",
                    p % w,
                    p / w
                )));
            }
        }
        Ok(())
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (u, o) in out.iter_mut().enumerate() {
            let mut v = self.diag[u] * x[u];
            for &n in &self.neighbors[u] {
                if n != NONE {
                    v -= x[n];
                }
            }
            *o = v;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve the masked Poisson system with the conjugate residual method, whose
/// residual norm never increases between iterations.
pub fn solve(problem: &PoissonProblem, tol: f64, max_iter: Option<usize>) -> Result<PoissonSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {} must be positive", tol)));
    }
    let sys = System::assemble(problem)?;
    let n = sys.pixels.len();
    let boundary = problem.boundary.data();
    let mut out: Vec<f64> = boundary.iter().map(|&v| v as f64).collect();
    if n == 0 {
        return Ok(PoissonSolution {
            field: problem.boundary.clone(),
            iterations: 0,
            relative_residual: 0.0,
            residual_history: vec![0.0],
        });
    }
    let max_iter = max_iter.unwrap_or(10 * n);

    let mut x: Vec<f64> = sys.pixels.iter().map(|&p| out[p]).collect();
    let b_norm = dot(&sys.rhs, &sys.rhs).sqrt();
    let scale = if b_norm > 0.0 { b_norm } else { 1.0 };

    let mut ax = vec![0.0; n];
    sys.apply(&x, &mut ax);
    let mut r: Vec<f64> = sys.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut ar = vec![0.0; n];
    sys.apply(&r, &mut ar);
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut r_ar = dot(&r, &ar);
    let mut history = vec![dot(&r, &r).sqrt() / scale];
    let mut iterations = 0;

    while *history.last().unwrap() > tol {
        if iterations >= max_iter {
            return Err(Error::NoConvergence {
                iterations,
                residual: *history.last().unwrap(),
            });
        }
        let ap_ap = dot(&ap, &ap);
        if ap_ap == 0.0 {
            break;
        }
        let alpha = r_ar / ap_ap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        sys.apply(&r, &mut ar);
        let r_ar_next = dot(&r, &ar);
        let beta = r_ar_next / r_ar;
        r_ar = r_ar_next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
            ap[i] = ar[i] + beta * ap[i];
        }
        iterations += 1;
        history.push(dot(&r, &r).sqrt() / scale);
    }

    // report the true residual rather than the recurrence
    sys.apply(&x, &mut ax);
    let true_res = sys
        .rhs
        .iter()
        .zip(&ax)
        .map(|(b, a)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt()
        / scale;
    for (u, &pix) in sys.pixels.iter().enumerate() {
        out[pix] = x[u];
    }
    let field = ScalarField::new(
        problem.boundary.width(),
        problem.boundary.height(),
        out.into_iter().map(|v| v as f32).collect(),
    )?;
    Ok(PoissonSolution {
        field,
        iterations,
        relative_residual: true_res,
        residual_history: history,
    })
}

/// Paste `fg` into `bg` over `region` in the gradient domain: inside the
/// region the result follows the gradients of `fg`, outside it equals `bg`.
pub fn seamless_composite(fg: &ScalarField, bg: &ScalarField, region: &Mask, tol: f64) -> Result<ScalarField> {
    if fg.width() != bg.width() || fg.height() != bg.height() || !region.same_size(fg) {
        return Err(Error::ShapeMismatch("composite inputs differ in size".into()));
    }
    let start: Vec<f32> = bg
        .data()
        .iter()
        .zip(fg.data())
        .enumerate()
        .map(|(i, (&b, &f))| if region.at(i) { f } else { b })
        .collect();
    let problem = PoissonProblem {
        region: region.clone(),
        guidance: GuidanceField::gradient_of(fg),
        boundary: ScalarField::new(bg.width(), bg.height(), start)?,
    };
    Ok(solve(&problem, tol, None)?.field)
}

/// Fill `holes` with the harmonic interpolant of the surrounding values.
pub fn harmonic_infill(field: &ScalarField, holes: &Mask, tol: f64) -> Result<ScalarField> {
    if !holes.same_size(field) {
        return Err(Error::ShapeMismatch("hole mask differs from field".into()));
    }
    if holes.is_empty() {
        return Ok(field.clone());
    }
    let (w, h) = (field.width(), field.height());
    let touches = |f: &dyn Fn(usize) -> (usize, usize), n: usize| (0..n).any(|k| {
        let (x, y) = f(k);
        holes.get(x, y)
    });
    if touches(&|k| (k, 0), w) && touches(&|k| (k, h - 1), w) && touches(&|k| (0, k), h) && touches(&|k| (w - 1, k), h) {
        return Err(Error::UnanchoredRegion("hole touches all four image borders".into()));
    }
    let problem = PoissonProblem {
        region: holes.clone(),
        guidance: GuidanceField::zero(w, h),
        boundary: field.clone(),
    };
    Ok(solve(&problem, tol, None)?.field)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interior(w: usize, h: usize, m: usize) -> Mask {
        Mask::from_fn(w, h, |x, y| x >= m && y >= m && x + m < w && y + m < h)
    }

    #[test]
    fn constant_boundary_zero_guidance() {
        let f = ScalarField::filled(10, 8, 2.5);
        let out = harmonic_infill(&f, &interior(10, 8, 2), 1e-10).unwrap();
        for &v in out.data() {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn no_holes_is_identity() {
        let f = ScalarField::from_fn(5, 5, |x, y| (x * y) as f32).unwrap();
        assert_eq!(harmonic_infill(&f, &Mask::filled(5, 5, false), 1e-8).unwrap(), f);
    }

    #[test]
    fn hole_spanning_image_rejected() {
        let f = ScalarField::filled(6, 6, 1.0);
        let holes = Mask::from_fn(6, 6, |x, y| x == 0 || y == 0 || x == 5 || y == 5);
        assert!(matches!(harmonic_infill(&f, &holes, 1e-8), Err(Error::UnanchoredRegion(_))));
    }

    #[test]
    fn region_without_boundary_rejected() {
        let p = PoissonProblem {
            region: Mask::filled(4, 4, true),
            guidance: GuidanceField::zero(4, 4),
            boundary: ScalarField::filled(4, 4, 0.0),
        };
        assert!(matches!(solve(&p, 1e-8, None), Err(Error::UnanchoredRegion(_))));
    }

    #[test]
    fn identical_fg_bg() {
        let bg = ScalarField::from_fn(12, 12, |x, y| 1.0 + 0.1 * x as f32 - 0.05 * (y * y) as f32).unwrap();
        let out = seamless_composite(&bg, &bg, &interior(12, 12, 3), 1e-8).unwrap();
        for (a, b) in out.data().iter().zip(bg.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn global_offset_is_removed() {
        let bg = ScalarField::from_fn(12, 10, |x, y| 3.0 + 0.2 * x as f32 + 0.1 * y as f32).unwrap();
        let fg = ScalarField::from_fn(12, 10, |x, y| bg.get(x, y) + 5.0).unwrap();
        let out = seamless_composite(&fg, &bg, &interior(12, 10, 2), 1e-10).unwrap();
        for (a, b) in out.data().iter().zip(bg.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn residual_history_never_increases() {
        let w = 20;
        let bnd = ScalarField::from_fn(w, w, |x, y| ((x * 5 + y * 11) % 7) as f32).unwrap();
        let g = GuidanceField::gradient_of(&ScalarField::from_fn(w, w, |x, y| ((x * y) % 5) as f32).unwrap());
        let p = PoissonProblem {
            region: interior(w, w, 1),
            guidance: g,
            boundary: bnd,
        };
        let sol = solve(&p, 1e-10, None).unwrap();
        assert!(sol.relative_residual <= 1e-9);
        for pair in sol.residual_history.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "{:?}", pair);
        }
    }

    #[test]
    fn nonconvergence_reports_residual() {
        let p = PoissonProblem {
            region: interior(16, 16, 1),
            guidance: GuidanceField::zero(16, 16),
            boundary: ScalarField::from_fn(16, 16, |x, y| if x == 0 { 1.0 } else { (y % 2) as f32 }).unwrap(),
        };
        match solve(&p, 1e-12, Some(2)) {
            Err(Error::NoConvergence { iterations: 2, residual }) => assert!(residual > 1e-12),
            other => panic!("unexpected {:?}", other.map(|s| s.iterations)),
        }
    }
}
