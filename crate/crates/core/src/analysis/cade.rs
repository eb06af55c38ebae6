//! Microcalcification detection stand-in.
//!
//! A pixel is a candidate when it is strictly brighter than every in-bounds
//! 8-neighbour and brighter than `mean + k * sd` of the whole image (population
//! standard deviation). Candidates are grouped by single linkage at Chebyshev
//! distance `<= link_distance`; groups with at least `min_points` members are
//! reported with their centroid.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{AnalysisError, PixelMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CadeParams {
    pub sigma_k: u32,
    pub link_distance: u32,
    pub min_points: usize,
}

impl Default for CadeParams {
    fn default() -> Self {
        Self {
            sigma_k: 3,
            link_distance: 8,
            min_points: 3,
        }
    }
}

impl CadeParams {
    pub fn from_map(params: &BTreeMap<String, String>) -> Result<Self, AnalysisError> {
        let mut out = Self::default();
        for (k, v) in params {
            let n: u32 = v
                .parse()
                .map_err(|_| AnalysisError::InvalidParam(format!("{k}={v} is not a non-negative integer")))?;
            match k.as_str() {
                "sigma_k" => out.sigma_k = n,
                "link_distance" => out.link_distance = n,
                "min_points" if n >= 1 => out.min_points = n as usize,
                "min_points" => return Err(AnalysisError::InvalidParam("min_points must be >= 1".into())),
                other => return Err(AnalysisError::InvalidParam(format!("cade takes no parameter {other:?}"))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub centroid_x: f64,
    pub centroid_y: f64,
    pub point_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CadeMeasure {
    /// `(x, y, value)` in raster order.
    pub candidate_points: Vec<(u32, u32, u16)>,
    pub clusters: Vec<Cluster>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CadeResult {
    pub guid: String,
    #[serde(flatten)]
    pub measure: CadeMeasure,
}

fn is_local_max(m: &PixelMatrix, x: u32, y: u32) -> bool {
    let v = m.get(x, y);
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= m.width as i64 || ny >= m.height as i64 {
                continue;
            }
            if m.get(nx as u32, ny as u32) >= v {
                return false;
            }
        }
    }
    true
}

/// Candidate points in raster order.
pub(crate) fn candidates(m: &PixelMatrix, sigma_k: u32) -> Vec<(u32, u32, u16)> {
    let n = m.samples.len() as i128;
    let (mut s, mut q) = (0i128, 0i128);
    for &p in &m.samples {
        s += p as i128;
        q += (p as i128) * (p as i128);
    }
    // v > mean + k*sd  <=>  n*v - S > 0  and  (n*v - S)^2 > k^2 (n*Q - S^2)
    let spread = n * q - s * s;
    let k2 = (sigma_k as i128) * (sigma_k as i128);
    let mut out = Vec::new();
    for y in 0..m.height {
        for x in 0..m.width {
            let v = m.get(x, y) as i128;
            let d = n * v - s;
            if d > 0 && d * d > k2 * spread && is_local_max(m, x, y) {
                out.push((x, y, v as u16));
            }
        }
    }
    out
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage groups as index lists, ordered by their first member.
pub(crate) fn link(points: &[(u32, u32, u16)], dist: u32) -> Vec<Vec<usize>> {
    let cell = dist as u64 + 1;
    let mut grid: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
    for (i, &(x, y, _)) in points.iter().enumerate() {
        grid.entry((x as u64 / cell, y as u64 / cell)).or_default().push(i);
    }
    let mut parent: Vec<usize> = (0..points.len()).collect();
    for (i, &(x, y, _)) in points.iter().enumerate() {
        let (cx, cy) = (x as u64 / cell, y as u64 / cell);
        for gy in cy.saturating_sub(1)..=cy + 1 {
            for gx in cx.saturating_sub(1)..=cx + 1 {
                let Some(bucket) = grid.get(&(gx, gy)) else { continue };
                for &j in bucket {
                    if j <= i {
                        continue;
                    }
                    let (ox, oy, _) = points[j];
                    if x.abs_diff(ox).max(y.abs_diff(oy)) <= dist {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        if a != b {
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..points.len() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}

pub fn detect_microcalc(m: &PixelMatrix, params: &CadeParams) -> Result<CadeMeasure, AnalysisError> {
    if m.width < 3 || m.height < 3 {
        return Err(AnalysisError::ImageTooSmall {
            width: m.width,
            height: m.height,
        });
    }
    let points = candidates(m, params.sigma_k);
    let clusters = link(&points, params.link_distance)
        .into_iter()
        .filter(|g| g.len() >= params.min_points)
        .map(|g| {
            let n = g.len() as f64;
            let sx: u64 = g.iter().map(|&i| points[i].0 as u64).sum();
            let sy: u64 = g.iter().map(|&i| points[i].1 as u64).sum();
            Cluster {
                centroid_x: sx as f64 / n,
                centroid_y: sy as f64 / n,
                point_count: g.len(),
            }
        })
        .collect();
    Ok(CadeMeasure {
        candidate_points: points,
        clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(w: u32, h: u32, v: u16) -> PixelMatrix {
        PixelMatrix::new(w, h, 8, vec![v; (w * h) as usize])
    }

    fn set(m: &mut PixelMatrix, x: u32, y: u32, v: u16) {
        let w = m.width as usize;
        m.samples[y as usize * w + x as usize] = v;
    }

    #[test]
    fn too_small() {
        let m = flat(2, 5, 0);
        assert_eq!(
            detect_microcalc(&m, &CadeParams::default()),
            Err(AnalysisError::ImageTooSmall { width: 2, height: 5 })
        );
    }

    #[test]
    fn flat_image_has_no_candidates() {
        let m = detect_microcalc(&flat(16, 16, 40), &CadeParams::default()).unwrap();
        assert!(m.candidate_points.is_empty());
        assert!(m.clusters.is_empty());
    }

    #[test]
    fn single_spike_mean_and_sd() {
        // 10x10 of zeros with one 100: mean 1, sd sqrt(99), threshold ~30.85.
        let mut m = flat(10, 10, 0);
        set(&mut m, 4, 4, 100);
        assert_eq!(candidates(&m, 3), vec![(4, 4, 100)]);
        // With k = 10 the threshold is ~100.5, so the spike no longer counts.
        assert!(candidates(&m, 10).is_empty());
    }

    #[test]
    fn lone_spike_in_large_image() {
        // mean = 255/4096, var = 255^2 * 4095 / 4096^2, so mean + 3sd ~ 12.0
        let mut m = flat(64, 64, 0);
        set(&mut m, 20, 30, 255);
        let r = detect_microcalc(&m, &CadeParams::default()).unwrap();
        assert_eq!(r.candidate_points, vec![(20, 30, 255)]);
        assert!(r.clusters.is_empty());
        let mean = 255.0 / 4096.0;
        let sd = (255.0f64 * 255.0 * 4095.0 / (4096.0 * 4096.0)).sqrt();
        assert!((mean + 3.0 * sd - 11.99).abs() < 0.05);
    }

    #[test]
    fn plateau_is_not_a_strict_maximum() {
        let mut m = flat(12, 12, 0);
        set(&mut m, 3, 3, 200);
        set(&mut m, 4, 3, 200);
        assert!(candidates(&m, 3).is_empty());
    }

    #[test]
    fn border_pixels_compare_in_bounds_only() {
        let mut m = flat(12, 12, 0);
        set(&mut m, 0, 0, 250);
        set(&mut m, 11, 11, 250);
        assert_eq!(candidates(&m, 3), vec![(0, 0, 250), (11, 11, 250)]);
    }

    #[test]
    fn cluster_of_three_and_lone_point() {
        let mut m = flat(64, 64, 10);
        for (x, y) in [(10, 10), (18, 10), (26, 12), (50, 50)] {
            set(&mut m, x, y, 255);
        }
        let r = detect_microcalc(&m, &CadeParams::default()).unwrap();
        assert_eq!(r.candidate_points.len(), 4);
        assert_eq!(r.clusters.len(), 1);
        let c = &r.clusters[0];
        assert_eq!(c.point_count, 3);
        assert!((c.centroid_x - 18.0).abs() < 1e-12);
        assert!((c.centroid_y - 32.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn distance_nine_does_not_link() {
        let mut m = flat(64, 64, 10);
        for (x, y) in [(10, 10), (19, 10), (28, 10)] {
            set(&mut m, x, y, 255);
        }
        let r = detect_microcalc(&m, &CadeParams::default()).unwrap();
        assert_eq!(r.candidate_points.len(), 3);
        assert!(r.clusters.is_empty());
    }

    // Oracle: float thresholds with a wide margin check plus O(n^2) linkage.
    fn brute_candidates(m: &PixelMatrix) -> Vec<(u32, u32, u16)> {
        let n = m.samples.len() as f64;
        let mean = m.samples.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = m.samples.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let thr = mean + 3.0 * var.sqrt();
        let mut out = Vec::new();
        for y in 0..m.height as i64 {
            for x in 0..m.width as i64 {
                let v = m.get(x as u32, y as u32);
                let mut ok = v as f64 > thr;
                for (dx, dy) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < m.width as i64 && ny < m.height as i64 {
                        ok &= m.get(nx as u32, ny as u32) < v;
                    }
                }
                if ok {
                    out.push((x as u32, y as u32, v));
                }
            }
        }
        out
    }

    fn brute_clusters(points: &[(u32, u32, u16)]) -> Vec<(f64, f64, usize)> {
        let n = points.len();
        let mut label: Vec<usize> = (0..n).collect();
        loop {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    let d = points[i].0.abs_diff(points[j].0).max(points[i].1.abs_diff(points[j].1));
                    if d <= 8 && label[j] < label[i] {
                        label[i] = label[j];
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut out = Vec::new();
        for root in 0..n {
            let members: Vec<_> = (0..n).filter(|&i| label[i] == root).collect();
            if members.len() >= 3 {
                let k = members.len() as f64;
                let cx = members.iter().map(|&i| points[i].0 as f64).sum::<f64>() / k;
                let cy = members.iter().map(|&i| points[i].1 as f64).sum::<f64>() / k;
                out.push((cx, cy, members.len()));
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_on_seeded_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (w, h) = (rng.gen_range(3..60), rng.gen_range(3..60));
            let mut m = flat(w, h, 0);
            for s in m.samples.iter_mut() {
                *s = rng.gen_range(20..60);
            }
            for _ in 0..rng.gen_range(0..25) {
                let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
                set(&mut m, x, y, rng.gen_range(150..=255));
            }
            let got = detect_microcalc(&m, &CadeParams::default()).unwrap();
            assert_eq!(got.candidate_points, brute_candidates(&m));
            let clusters: Vec<_> = got
                .clusters
                .iter()
                .map(|c| (c.centroid_x, c.centroid_y, c.point_count))
                .collect();
            assert_eq!(clusters, brute_clusters(&got.candidate_points));
        }
    }

    #[test]
    fn params_parse() {
        let mut p = BTreeMap::new();
        p.insert("link_distance".to_string(), "2".to_string());
        let c = CadeParams::from_map(&p).unwrap();
        assert_eq!(c.link_distance, 2);
        assert_eq!(c.sigma_k, 3);
        p.insert("min_points".to_string(), "0".to_string());
        assert!(CadeParams::from_map(&p).is_err());
    }
}
