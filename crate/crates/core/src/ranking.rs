//! Entropy-weight candidate scoring, occlusion-aware roofline refinement and
//! building processing order.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::edgemap::{fill_polygon, EdgeMap, LinePixels, LineSegment, Mask, Pixel};
use crate::error::{Error, Result};

/// Feature vector shared by corner and roofline candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateFeatures {
    /// Detected length in pixels.
    pub lambda: f64,
    /// Edgeness.
    pub omega: f64,
    /// Number of agreeing same-building corner candidates.
    pub tau: f64,
    /// Horizontal pixel distance to the nearer quarter vertical (corners only).
    pub rho: f64,
    /// Corner-to-camera distance in meters (corners only).
    pub d: f64,
}

impl CandidateFeatures {
    pub fn corner_row(&self) -> Vec<f64> {
        vec![self.lambda, self.omega, self.tau, self.rho, self.d]
    }

    pub fn roofline_row(&self) -> Vec<f64> {
        vec![self.lambda, self.omega, self.tau]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

/// Candidates as rows, parameters as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionMatrix {
    pub rows: Vec<Vec<f64>>,
    pub polarity: Vec<Polarity>,
}

impl DecisionMatrix {
    pub fn new(rows: Vec<Vec<f64>>, polarity: Vec<Polarity>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("decision matrix has no rows"));
        }
        if polarity.is_empty() {
            return Err(Error::EmptyInput("decision matrix has no columns"));
        }
        if rows.iter().any(|r| r.len() != polarity.len()) {
            return Err(Error::DimensionMismatch("row length differs from column count".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch("non-finite matrix entry".into()));
        }
        Ok(Self { rows, polarity })
    }

    pub fn samples(&self) -> usize {
        self.rows.len()
    }

    pub fn params(&self) -> usize {
        self.polarity.len()
    }

    fn column_range(&self, j: usize) -> (f64, f64) {
        self.rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r[j]), hi.max(r[j]))
        })
    }

    /// Column values oriented so that larger is always better, in `[0, 1]`.
    /// Constant columns carry no preference and map to zero.
    pub fn oriented(&self) -> Vec<Vec<f64>> {
        let ranges: Vec<_> = (0..self.params()).map(|j| self.column_range(j)).collect();
        self.rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let (lo, hi) = ranges[j];
                        if hi - lo <= 0.0 {
                            0.0
                        } else if self.polarity[j] == Polarity::Positive {
                            (v - lo) / (hi - lo)
                        } else {
                            (hi - v) / (hi - lo)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Min-max scaling. Positive columns map to `(r - min) / range`; negative
/// columns to `(r - min) / range + 1`. Constant columns become 0 or 1.
pub fn minmax_scale(matrix: &DecisionMatrix) -> Vec<Vec<f64>> {
    let ranges: Vec<_> = (0..matrix.params()).map(|j| matrix.column_range(j)).collect();
    matrix
        .rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let (lo, hi) = ranges[j];
                    let base = if hi - lo <= 0.0 { 0.0 } else { (v - lo) / (hi - lo) };
                    match matrix.polarity[j] {
                        Polarity::Positive => base,
                        Polarity::Negative => base + 1.0,
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Entropy weights of a nonnegative scaled matrix.
pub fn entropy_weights(scaled: &[Vec<f64>]) -> WeightVector {
    let m = scaled.len();
    let n = scaled.first().map_or(0, |r| r.len());
    let entropies: Vec<f64> = (0..n)
        .map(|j| {
            let total: f64 = scaled.iter().map(|r| r[j]).sum();
            if m < 2 || total <= 0.0 {
                return 1.0;
            }
            let h: f64 = scaled
                .iter()
                .map(|r| {
                    let p = r[j] / total;
                    if p > 0.0 {
                        p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum();
            (-h / (m as f64).ln()).clamp(0.0, 1.0)
        })
        .collect();
    let spread: f64 = entropies.iter().map(|e| 1.0 - e).sum();
    let weights = if spread <= 1e-15 {
        vec![1.0 / n as f64; n]
    } else {
        entropies.iter().map(|e| (1.0 - e) / spread).collect()
    };
    WeightVector { weights, entropies }
}

/// A candidate index with its score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub index: usize,
    pub score: f64,
}

/// Scores every row and sorts descending; equal scores keep index order.
pub fn rank_matrix(matrix: &DecisionMatrix) -> (Vec<Ranked>, WeightVector) {
    let weights = entropy_weights(&minmax_scale(matrix));
    let oriented = matrix.oriented();
    let mut ranked: Vec<Ranked> = oriented
        .iter()
        .enumerate()
        .map(|(index, row)| Ranked {
            index,
            score: row.iter().zip(&weights.weights).map(|(v, w)| v * w).sum(),
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    (ranked, weights)
}

pub const CORNER_POLARITY: [Polarity; 5] = [
    Polarity::Positive,
    Polarity::Positive,
    Polarity::Positive,
    Polarity::Positive,
    Polarity::Negative,
];

pub fn score_corner_candidates(features: &[CandidateFeatures]) -> Result<Vec<Ranked>> {
    if features.is_empty() {
        return Err(Error::EmptyInput("no corner candidates"));
    }
    let matrix = DecisionMatrix::new(
        features.iter().map(CandidateFeatures::corner_row).collect(),
        CORNER_POLARITY.to_vec(),
    )?;
    Ok(rank_matrix(&matrix).0)
}

pub fn score_roofline_candidates(features: &[CandidateFeatures]) -> Result<Vec<Ranked>> {
    if features.is_empty() {
        return Err(Error::EmptyInput("no roofline candidates"));
    }
    let matrix = DecisionMatrix::new(
        features.iter().map(CandidateFeatures::roofline_row).collect(),
        vec![Polarity::Positive; 3],
    )?;
    Ok(rank_matrix(&matrix).0)
}

/// How refined edgeness is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgenessVariant {
    /// `(1 + len_ini / len) * sum of unmasked intensities`.
    #[default]
    Boosted,
    /// Initial edgeness rescaled by `len / len_ini`.
    Rescaled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedRoofline {
    pub initial_length: f64,
    pub length: f64,
    pub edgeness: f64,
    /// Pixels counted toward the refined line.
    pub pixels: Vec<Pixel>,
}

fn major_axis_is_x(a: Pixel, b: Pixel) -> bool {
    (b.x - a.x).abs() >= (b.y - a.y).abs()
}

/// Refines a detected roofline against the occlusion mask `m` and tree mask `t`.
///
/// `span` is the full projected roofline at the candidate's height. Lengths
/// count distinct major-axis positions inside the span, so a refined line is
/// never longer than the span's rasterization.
pub fn refine_roofline(
    segment: &LineSegment,
    span: (Pixel, Pixel),
    m: &Mask,
    t: &Mask,
    e: &EdgeMap,
    variant: EdgenessVariant,
) -> Result<RefinedRoofline> {
    if !m.matches(e) || !t.matches(e) {
        return Err(Error::DimensionMismatch("mask and edge map sizes differ".into()));
    }
    let along_x = major_axis_is_x(span.0, span.1);
    let major = |p: Pixel| if along_x { p.x } else { p.y };
    let (lo, hi) = {
        let (a, b) = (major(span.0), major(span.1));
        (a.min(b), a.max(b))
    };
    let in_span = |p: Pixel| (lo..=hi).contains(&major(p));
    let length_of = |pixels: &HashSet<Pixel>| pixels.iter().map(|&p| major(p)).collect::<HashSet<_>>().len();

    let supported: Vec<Pixel> = segment
        .pixels()
        .filter(|&p| in_span(p) && e.get_or_zero(p) > 0)
        .collect();
    let initial: HashSet<Pixel> = supported.iter().copied().collect();
    let initial_length = length_of(&initial) as f64;

    let mut kept: HashSet<Pixel> = supported.into_iter().filter(|&p| !m.get(p)).collect();

    let mut hidden: Vec<Pixel> = segment
        .pixels()
        .chain(LinePixels::new(span.0, span.1))
        .filter(|&p| in_span(p) && t.get(p) && !m.get(p) && !kept.contains(&p))
        .collect();
    hidden.sort();
    hidden.dedup();
    loop {
        let before = hidden.len();
        hidden.retain(|&p| {
            let touches = (-1..=1).any(|dy| (-1..=1).any(|dx| kept.contains(&Pixel::new(p.x + dx, p.y + dy))));
            if touches {
                kept.insert(p);
            }
            !touches
        });
        if hidden.len() == before {
            break;
        }
    }

    let length = length_of(&kept) as f64;
    let intensity: f64 = kept.iter().map(|&p| e.get_or_zero(p) as f64).sum();
    let edgeness = if length == 0.0 {
        0.0
    } else {
        match variant {
            EdgenessVariant::Boosted => (1.0 + initial_length / length) * intensity,
            EdgenessVariant::Rescaled => {
                if initial_length == 0.0 {
                    0.0
                } else {
                    segment.edgeness * length / initial_length
                }
            }
        }
    };
    let mut pixels: Vec<Pixel> = kept.into_iter().collect();
    pixels.sort();
    Ok(RefinedRoofline {
        initial_length,
        length,
        edgeness,
        pixels,
    })
}

/// A building as seen by the ordering step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderItem {
    pub index: usize,
    pub has_valid_corner: bool,
    pub distance: f64,
}

/// Buildings with a validated corner first, each group nearest first.
pub fn order_buildings(items: &[OrderItem]) -> Vec<usize> {
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| {
        b.has_valid_corner
            .cmp(&a.has_valid_corner)
            .then(a.distance.total_cmp(&b.distance))
            .then(a.index.cmp(&b.index))
    });
    sorted.into_iter().map(|i| i.index).collect()
}

/// Convex hull (counter-clockwise in the input's axes) by monotone chain.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Marks the convex hull of a building's projected points in `mask`.
pub fn update_mask(mask: &mut Mask, scope: &[(f64, f64)]) {
    let hull = convex_hull(scope);
    let (w, h) = (mask.width(), mask.height());
    fill_polygon(w, h, &hull, |x, y| mask.set(Pixel::new(x as i64, y as i64), true));
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(cols: &[&[f64]], polarity: &[Polarity]) -> DecisionMatrix {
        let m = cols[0].len();
        let rows = (0..m).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        DecisionMatrix::new(rows, polarity.to_vec()).unwrap()
    }

    #[test]
    fn minmax_examples() {
        use Polarity::*;
        let s = minmax_scale(&matrix(&[&[2.0, 4.0, 6.0], &[2.0, 4.0, 6.0], &[5.0, 5.0, 5.0]], &[Positive, Negative, Positive]));
        let col = |j: usize| s.iter().map(|r| r[j]).collect::<Vec<_>>();
        assert_eq!(col(0), vec![0.0, 0.5, 1.0]);
        assert_eq!(col(1), vec![1.0, 1.5, 2.0]);
        assert_eq!(col(2), vec![0.0, 0.0, 0.0]);
        let s = minmax_scale(&matrix(&[&[3.0, 3.0]], &[Negative]));
        assert_eq!(s, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn entropy_examples() {
        let w = entropy_weights(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(w.entropies, vec![0.0, 1.0]);
        assert_eq!(w.weights, vec![1.0, 0.0]);

        let w = entropy_weights(&[vec![0.25, 1.0], vec![0.25, 0.0], vec![0.25, 0.5], vec![0.25, 0.2]]);
        assert!((w.entropies[0] - 1.0).abs() < 1e-12);
        assert!(w.weights[0].abs() < 1e-12);

        let same = vec![vec![0.1, 0.1], vec![0.7, 0.7], vec![0.3, 0.3]];
        let w = entropy_weights(&same);
        assert!((w.weights[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_entropy_cases() {
        let w = entropy_weights(&[vec![0.5, 2.0]]);
        assert_eq!(w.entropies, vec![1.0, 1.0]);
        assert_eq!(w.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn single_and_dominant_candidates() {
        let f = CandidateFeatures { lambda: 3.0, omega: 1.0, tau: 0.0, rho: 2.0, d: 10.0 };
        assert_eq!(score_corner_candidates(&[f]).unwrap()[0].index, 0);
        let worse = CandidateFeatures { lambda: 1.0, omega: 0.5, tau: 0.0, rho: 1.0, d: 30.0 };
        let best = CandidateFeatures { lambda: 5.0, omega: 9.0, tau: 2.0, rho: 4.0, d: 8.0 };
        let ranked = score_corner_candidates(&[worse, f, best]).unwrap();
        assert_eq!(ranked[0].index, 2);
        assert!(score_corner_candidates(&[]).is_err());

        let truth = CandidateFeatures { lambda: 50.0, omega: 9000.0, tau: 3.0, ..Default::default() };
        let decoy = CandidateFeatures { tau: 0.0, ..truth };
        assert_eq!(score_roofline_candidates(&[decoy, truth]).unwrap()[0].index, 1);
        assert!(matches!(score_roofline_candidates(&[]), Err(Error::EmptyInput(_))));
    }

    fn blank_masks(w: usize, h: usize) -> (Mask, Mask) {
        (Mask::new(w, h), Mask::new(w, h))
    }

    #[test]
    fn refinement_with_empty_masks_doubles_edgeness() {
        let mut e = EdgeMap::new(80, 20);
        e.draw_line(Pixel::new(5, 10), Pixel::new(64, 10), 200).unwrap();
        let seg = LineSegment::measure(&e, Pixel::new(5, 10), Pixel::new(64, 10)).unwrap();
        let (m, t) = blank_masks(80, 20);
        let r = refine_roofline(&seg, (seg.p0, seg.p1), &m, &t, &e, EdgenessVariant::Boosted).unwrap();
        assert_eq!(r.length, r.initial_length);
        assert_eq!(r.length, 60.0);
        assert_eq!(r.edgeness, 2.0 * seg.edgeness);
        let r = refine_roofline(&seg, (seg.p0, seg.p1), &m, &t, &e, EdgenessVariant::Rescaled).unwrap();
        assert_eq!(r.edgeness, seg.edgeness);
    }

    #[test]
    fn fully_masked_segment_is_zeroed() {
        let mut e = EdgeMap::new(80, 20);
        e.draw_line(Pixel::new(5, 10), Pixel::new(64, 10), 200).unwrap();
        let seg = LineSegment::measure(&e, Pixel::new(5, 10), Pixel::new(64, 10)).unwrap();
        let (mut m, t) = blank_masks(80, 20);
        for x in 0..80 {
            for y in 0..20 {
                m.set(Pixel::new(x, y), true);
            }
        }
        let r = refine_roofline(&seg, (seg.p0, seg.p1), &m, &t, &e, EdgenessVariant::Boosted).unwrap();
        assert_eq!((r.length, r.edgeness), (0.0, 0.0));
    }

    #[test]
    fn tree_hidden_middle_third_is_recovered() {
        let (a, b) = (Pixel::new(10, 30), Pixel::new(99, 12));
        let mut e = EdgeMap::new(120, 40);
        e.draw_line(a, b, 255).unwrap();
        let (m, mut t) = blank_masks(120, 40);
        let pixels: Vec<_> = LinePixels::new(a, b).collect();
        let n = pixels.len();
        for &p in &pixels[n / 3..2 * n / 3] {
            e.set(p.x as usize, p.y as usize, 0);
            for dy in -2..=2 {
                t.set(Pixel::new(p.x, p.y + dy), true);
            }
        }
        let seg = LineSegment::measure(&e, a, b).unwrap();
        let r = refine_roofline(&seg, (a, b), &m, &t, &e, EdgenessVariant::Boosted).unwrap();
        assert!((r.initial_length - (n - (2 * n / 3 - n / 3)) as f64).abs() < 1.0);
        assert!((r.length - n as f64).abs() <= 2.0);
    }

    #[test]
    fn processing_order() {
        let items = [
            OrderItem { index: 0, has_valid_corner: false, distance: 10.0 },
            OrderItem { index: 1, has_valid_corner: true, distance: 50.0 },
        ];
        assert_eq!(order_buildings(&items), vec![1, 0]);
        let items = [
            OrderItem { index: 0, has_valid_corner: true, distance: 20.0 },
            OrderItem { index: 1, has_valid_corner: true, distance: 10.0 },
        ];
        assert_eq!(order_buildings(&items), vec![1, 0]);
    }

    #[test]
    fn mask_update_covers_hull() {
        let mut m = Mask::new(50, 50);
        update_mask(&mut m, &[(10.0, 10.0), (30.0, 10.0), (20.0, 20.0), (30.0, 30.0), (10.0, 30.0)]);
        assert!(m.get(Pixel::new(20, 25)));
        assert!(m.get(Pixel::new(29, 20)));
        assert!(!m.get(Pixel::new(35, 20)));
    }

    fn random_features(seed: u64, m: usize) -> Vec<CandidateFeatures> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| CandidateFeatures {
                lambda: rng.random_range(0.0..100.0),
                omega: rng.random_range(0.0..10000.0),
                tau: rng.random_range(0..3) as f64,
                rho: rng.random_range(0.0..160.0),
                d: rng.random_range(5.0..80.0),
            })
            .collect()
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_follow_permutations(seed in 0u64..10_000, m in 1usize..12, rot in 0usize..5) {
            let f = random_features(seed, m);
            let matrix = DecisionMatrix::new(f.iter().map(|x| x.corner_row()).collect(), CORNER_POLARITY.to_vec()).unwrap();
            let (_, w) = rank_matrix(&matrix);
            prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.weights.iter().all(|&x| x >= 0.0));

            let mut rows = matrix.rows.clone();
            rows.reverse();
            let (_, wr) = rank_matrix(&DecisionMatrix::new(rows, CORNER_POLARITY.to_vec()).unwrap());
            for (a, b) in w.weights.iter().zip(&wr.weights) {
                prop_assert!((a - b).abs() < 1e-12);
            }

            let permute = |r: &Vec<f64>| -> Vec<f64> { (0..5).map(|j| r[(j + rot) % 5]).collect() };
            let pol: Vec<_> = (0..5).map(|j| CORNER_POLARITY[(j + rot) % 5]).collect();
            let (_, wp) = rank_matrix(&DecisionMatrix::new(matrix.rows.iter().map(permute).collect(), pol).unwrap());
            for j in 0..5 {
                prop_assert!((wp.weights[j] - w.weights[(j + rot) % 5]).abs() < 1e-12);
            }
        }

        #[test]
        fn duplication_preserves_order(seed in 0u64..10_000, m in 1usize..10) {
            let f = random_features(seed, m);
            let once = score_corner_candidates(&f).unwrap();
            let twice_input: Vec<_> = f.iter().chain(f.iter()).copied().collect();
            let twice = score_corner_candidates(&twice_input).unwrap();
            let firsts: Vec<_> = twice.iter().filter(|r| r.index < m).map(|r| r.index).collect();
            prop_assert_eq!(firsts, once.iter().map(|r| r.index).collect::<Vec<_>>());
        }

        #[test]
        fn dominated_candidates_never_outrank(seed in 0u64..10_000, m in 2usize..10) {
            let mut f = random_features(seed, m);
            // Make row 1 strictly dominate row 0.
            f[1] = CandidateFeatures {
                lambda: f[0].lambda + 1.0,
                omega: f[0].omega + 1.0,
                tau: f[0].tau + 1.0,
                rho: f[0].rho + 1.0,
                d: f[0].d - 1.0,
            };
            let ranked = score_corner_candidates(&f).unwrap();
            let pos = |i: usize| ranked.iter().position(|r| r.index == i).unwrap();
            prop_assert!(pos(1) < pos(0));
        }
    }
}
