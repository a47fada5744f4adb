//! Direct transcriptions of the loss formulas: explicit sets, plain exponentials, no sharing
//! with the library's partition or reduction code.

use fscl_core::{LossKind, ViewBatch};

fn phi(b: &ViewBatch, i: usize, x: usize, t: f64) -> f64 {
    let z = b.embeddings();
    let d: f64 = z[i].iter().zip(&z[x]).map(|(a, c)| a * c).sum();
    (d / t).exp()
}

fn y(b: &ViewBatch, i: usize) -> usize {
    b.targets()[i]
}

fn s(b: &ViewBatch, i: usize) -> usize {
    b.sensitive()[i].expect("oracle needs sensitive labels")
}

fn sibling(b: &ViewBatch, i: usize) -> usize {
    (0..b.len())
        .find(|&x| x != i && b.origins()[x] == b.origins()[i])
        .expect("sibling view")
}

fn sum_phi(b: &ViewBatch, i: usize, t: f64, keep: impl Fn(usize) -> bool) -> f64 {
    (0..b.len()).filter(|&x| keep(x)).map(|x| phi(b, i, x, t)).sum()
}

pub fn self_supervised(b: &ViewBatch, t: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..b.len() {
        let p = sibling(b, i);
        total -= (phi(b, i, p, t) / sum_phi(b, i, t, |a| a != i)).ln();
    }
    total
}

pub fn supcon_out(b: &ViewBatch, t: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..b.len() {
        let pos: Vec<usize> = (0..b.len()).filter(|&p| p != i && y(b, p) == y(b, i)).collect();
        if pos.is_empty() {
            continue;
        }
        let denom = sum_phi(b, i, t, |a| a != i);
        let inner: f64 = pos.iter().map(|&p| (phi(b, i, p, t) / denom).ln()).sum();
        total -= inner / pos.len() as f64;
    }
    total
}

pub fn supcon_in(b: &ViewBatch, t: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..b.len() {
        let pos: Vec<usize> = (0..b.len()).filter(|&p| p != i && y(b, p) == y(b, i)).collect();
        if pos.is_empty() {
            continue;
        }
        let avg: f64 = pos.iter().map(|&p| phi(b, i, p, t)).sum::<f64>() / pos.len() as f64;
        total -= (avg / sum_phi(b, i, t, |a| a != i)).ln();
    }
    total
}

/// Group form: for every group `(j, k)`, every anchor in it and every sensitive class `k'`.
pub fn supcon_groupform(b: &ViewBatch, t: f64) -> f64 {
    let n = b.len();
    let n_y = (0..n).map(|i| y(b, i)).max().unwrap() + 1;
    let n_s = (0..n).map(|i| s(b, i)).max().unwrap() + 1;
    let mut total = 0.0;
    for j in 0..n_y {
        for k in 0..n_s {
            for i in (0..n).filter(|&i| y(b, i) == j && s(b, i) == k) {
                let zp = (0..n).filter(|&p| p != i && y(b, p) == j).count();
                if zp == 0 {
                    continue;
                }
                let denom = sum_phi(b, i, t, |a| a != i);
                for kk in 0..n_s {
                    for p in (0..n).filter(|&p| p != i && y(b, p) == j && s(b, p) == kk) {
                        total -= (phi(b, i, p, t) / denom).ln() / zp as f64;
                    }
                }
            }
        }
    }
    total
}

pub fn fscl(b: &ViewBatch, t: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..b.len() {
        let pos: Vec<usize> = (0..b.len()).filter(|&p| p != i && y(b, p) == y(b, i)).collect();
        let has_tg = (0..b.len()).any(|x| y(b, x) != y(b, i) && s(b, x) == s(b, i));
        if pos.is_empty() || !has_tg {
            continue;
        }
        let denom = sum_phi(b, i, t, |x| y(b, x) != y(b, i) && s(b, x) == s(b, i));
        let inner: f64 = pos.iter().map(|&p| (phi(b, i, p, t) / denom).ln()).sum();
        total -= inner / pos.len() as f64;
    }
    total
}

pub fn fscl_plus(b: &ViewBatch, t: f64) -> f64 {
    let n = b.len();
    let n_y = (0..n).map(|i| y(b, i)).max().unwrap() + 1;
    let n_s = (0..n).map(|i| s(b, i)).max().unwrap() + 1;
    let mut total = 0.0;
    for j in 0..n_y {
        for k in 0..n_s {
            let group: Vec<usize> = (0..n).filter(|&i| y(b, i) == j && s(b, i) == k).collect();
            for &i in &group {
                let has_tg = (0..n).any(|x| y(b, x) != j && s(b, x) == k);
                if !has_tg {
                    continue;
                }
                let denom = sum_phi(b, i, t, |x| y(b, x) != j && s(b, x) == k);
                for kk in 0..n_s {
                    let zpk: Vec<usize> =
                        (0..n).filter(|&p| p != i && y(b, p) == j && s(b, p) == kk).collect();
                    if zpk.is_empty() {
                        continue;
                    }
                    let inner: f64 = zpk.iter().map(|&p| (phi(b, i, p, t) / denom).ln()).sum();
                    total -= inner / (zpk.len() * group.len()) as f64;
                }
            }
        }
    }
    total
}

pub fn fscl_dagger(b: &ViewBatch, t: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..b.len() {
        let p = sibling(b, i);
        let denom = sum_phi(b, i, t, |f| f != i && s(b, f) == s(b, i));
        total -= (phi(b, i, p, t) / denom).ln();
    }
    total
}

pub fn evaluate(kind: LossKind, b: &ViewBatch, t: f64) -> f64 {
    match kind {
        LossKind::SelfSupervised => self_supervised(b, t),
        LossKind::SupConOut => supcon_out(b, t),
        LossKind::SupConIn => supcon_in(b, t),
        LossKind::SupConGroupForm => supcon_groupform(b, t),
        LossKind::Fscl => fscl(b, t),
        LossKind::FsclPlus => fscl_plus(b, t),
        LossKind::FsclDagger => fscl_dagger(b, t),
    }
}

/// Fairness scores by explicit enumeration of per-group conditional frequencies.
pub mod fairness {
    fn rate(rows: &[(usize, usize, usize)], g: usize, y: usize, c: usize) -> Option<f64> {
        let support = rows.iter().filter(|r| r.2 == g && r.0 == y).count();
        if support == 0 {
            return None;
        }
        let hits = rows.iter().filter(|r| r.2 == g && r.0 == y && r.1 == c).count();
        Some(hits as f64 / support as f64)
    }

    fn groups(rows: &[(usize, usize, usize)]) -> Vec<usize> {
        let mut g: Vec<usize> = rows.iter().map(|r| r.2).collect();
        g.sort_unstable();
        g.dedup();
        g
    }

    fn classes(rows: &[(usize, usize, usize)]) -> usize {
        rows.iter().map(|r| r.0.max(r.1)).max().unwrap() + 1
    }

    /// Rows are `(y, c, s)`.
    pub fn equalized_odds(rows: &[(usize, usize, usize)]) -> f64 {
        let g = groups(rows);
        let mut gaps = vec![];
        for y in 0..classes(rows) {
            for c in 0..classes(rows) {
                for a in 0..g.len() {
                    for b in a + 1..g.len() {
                        if let (Some(p), Some(q)) = (rate(rows, g[a], y, c), rate(rows, g[b], y, c)) {
                            gaps.push((p - q).abs());
                        }
                    }
                }
            }
        }
        100.0 * gaps.iter().sum::<f64>() / gaps.len() as f64
    }

    pub fn equal_opportunity(rows: &[(usize, usize, usize)]) -> f64 {
        let g = groups(rows);
        let mut gaps = vec![];
        for y in 0..classes(rows) {
            for a in 0..g.len() {
                for b in a + 1..g.len() {
                    if let (Some(p), Some(q)) = (rate(rows, g[a], y, y), rate(rows, g[b], y, y)) {
                        gaps.push((p - q).abs());
                    }
                }
            }
        }
        100.0 * gaps.iter().sum::<f64>() / gaps.len() as f64
    }

    pub fn demographic_parity(rows: &[(usize, usize, usize)]) -> f64 {
        let g = groups(rows);
        let marginal = |grp: usize, c: usize| {
            let n = rows.iter().filter(|r| r.2 == grp).count();
            rows.iter().filter(|r| r.2 == grp && r.1 == c).count() as f64 / n as f64
        };
        let mut gaps = vec![];
        for c in 0..classes(rows) {
            for a in 0..g.len() {
                for b in a + 1..g.len() {
                    gaps.push((marginal(g[a], c) - marginal(g[b], c)).abs());
                }
            }
        }
        100.0 * gaps.iter().sum::<f64>() / gaps.len() as f64
    }
}
