//! Analytic stencil oracle shared by the integration targets.

use std::collections::BTreeMap;

use yyf_core::pde::assemble_generator;
use yyf_core::{build_grid, FilterModel};

/// Bivariate polynomial `Σ c x^i y^j`, enough to differentiate products of
/// coefficients and test fields exactly.
#[derive(Clone, Debug, Default)]
struct Poly(BTreeMap<(i32, i32), f64>);

impl Poly {
    fn new(terms: &[((i32, i32), f64)]) -> Self {
        let mut p = Poly::default();
        for &(k, c) in terms {
            *p.0.entry(k).or_default() += c;
        }
        p
    }
    fn eval(&self, x: f64, y: f64) -> f64 {
        self.0.iter().map(|(&(i, j), c)| c * x.powi(i) * y.powi(j)).sum()
    }
    fn mul(&self, o: &Poly) -> Poly {
        let mut p = Poly::default();
        for (&(i, j), a) in &self.0 {
            for (&(k, l), b) in &o.0 {
                *p.0.entry((i + k, j + l)).or_default() += a * b;
            }
        }
        p
    }
    fn add(&self, o: &Poly, s: f64) -> Poly {
        let mut p = self.clone();
        for (&k, c) in &o.0 {
            *p.0.entry(k).or_default() += s * c;
        }
        p
    }
    fn dx(&self) -> Poly {
        Poly(self.0.iter().filter(|(k, _)| k.0 > 0).map(|(&(i, j), c)| ((i - 1, j), c * i as f64)).collect())
    }
    fn dy(&self) -> Poly {
        Poly(self.0.iter().filter(|(k, _)| k.1 > 0).map(|(&(i, j), c)| ((i, j - 1), c * j as f64)).collect())
    }
}

/// Max error of `A u` against the analytic generator on interior nodes with
/// |x|∞ <= 1.
pub fn stencil_error_1d(points: usize) -> f64 {
    let a = Poly::new(&[((0, 0), 1.0), ((2, 0), 0.25)]);
    let f = Poly::new(&[((0, 0), 0.5), ((1, 0), -0.3), ((2, 0), 0.1)]);
    let h = Poly::new(&[((1, 0), 0.5)]);
    let u = Poly::new(&[((0, 0), 1.0), ((1, 0), 0.5), ((2, 0), -0.2), ((3, 0), 0.05), ((4, 0), 0.01)]);
    let (a2, f2, h2) = (a.clone(), f.clone(), h.clone());
    let m = FilterModel::builder("poly1", 1)
        .drift(move |x, o| o[0] = f2.eval(x[0], 0.0))
        .diffusion(1, |x, o| o[0] = (1.0 + 0.25 * x[0] * x[0]).sqrt())
        .diffusion_square(move |x, o| o[0] = a2.eval(x[0], 0.0))
        .observation(1, move |x, o| o[0] = h2.eval(x[0], 0.0))
        .build()
        .unwrap();
    let target = a.mul(&u).dx().dx().add(&f.mul(&u).dx(), -2.0).add(&h.mul(&h).mul(&u), -1.0);
    let g = build_grid(1, 2.0, points).unwrap();
    let gen = assemble_generator(&m, &g).unwrap();
    let uv: Vec<f64> = g.axis().iter().map(|&x| u.eval(x, 0.0)).collect();
    let mut out = vec![0.0; uv.len()];
    gen.apply(&uv, &mut out);
    g.axis()
        .iter()
        .enumerate()
        .filter(|(_, x)| x.abs() <= 1.0)
        .map(|(i, &x)| (out[i] - 0.5 * target.eval(x, 0.0)).abs())
        .fold(0.0, f64::max)
}

pub fn stencil_error_2d(points: usize) -> f64 {
    let a11 = Poly::new(&[((0, 0), 1.0), ((2, 0), 0.25)]);
    let a12 = Poly::new(&[((1, 1), 0.15)]);
    let a22 = Poly::new(&[((0, 0), 1.0), ((0, 2), 0.09)]);
    let f1 = Poly::new(&[((0, 0), 0.2), ((0, 1), -0.4), ((2, 0), 0.1)]);
    let f2 = Poly::new(&[((1, 0), 0.3), ((1, 1), 0.05)]);
    let h1 = Poly::new(&[((1, 0), 0.5)]);
    let h2 = Poly::new(&[((0, 1), 0.2), ((1, 1), 0.1)]);
    let u = Poly::new(&[((0, 0), 1.0), ((1, 0), 0.3), ((0, 2), -0.2), ((2, 1), 0.05), ((3, 1), 0.02), ((1, 3), -0.01)]);
    let c = (a11.clone(), a12.clone(), a22.clone(), f1.clone(), f2.clone(), h1.clone(), h2.clone());
    let (b11, b12, b22, g1, g2, k1, k2) = c;
    let m = FilterModel::builder("poly2", 2)
        .drift(move |x, o| {
            o[0] = g1.eval(x[0], x[1]);
            o[1] = g2.eval(x[0], x[1]);
        })
        .diffusion_square(move |x, o| {
            o[0] = b11.eval(x[0], x[1]);
            o[1] = b12.eval(x[0], x[1]);
            o[2] = o[1];
            o[3] = b22.eval(x[0], x[1]);
        })
        .observation(2, move |x, o| {
            o[0] = k1.eval(x[0], x[1]);
            o[1] = k2.eval(x[0], x[1]);
        })
        .build()
        .unwrap();
    let second = a11.mul(&u).dx().dx().add(&a22.mul(&u).dy().dy(), 1.0).add(&a12.mul(&u).dx().dy(), 2.0);
    let transport = f1.mul(&u).dx().add(&f2.mul(&u).dy(), 1.0);
    let potential = h1.mul(&h1).add(&h2.mul(&h2), 1.0).mul(&u);
    let target = second.add(&transport, -2.0).add(&potential, -1.0);
    let g = build_grid(2, 2.0, points).unwrap();
    let gen = assemble_generator(&m, &g).unwrap();
    let mut uv = vec![0.0; g.node_count()];
    g.for_each_node(|i, x| uv[i] = u.eval(x[0], x[1]));
    let mut out = vec![0.0; uv.len()];
    gen.apply(&uv, &mut out);
    let mut err: f64 = 0.0;
    g.for_each_node(|i, x| {
        if x[0].abs() <= 1.0 && x[1].abs() <= 1.0 {
            err = err.max((out[i] - 0.5 * target.eval(x[0], x[1])).abs());
        }
    });
    err
}
