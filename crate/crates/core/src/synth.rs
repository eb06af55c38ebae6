//! Seeded synthetic screening data, random queries and test images.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::PixelMatrix;
use crate::ingest::mgif::{ClinicalFields, Identifying, ImageDescriptor, RawCase};
use crate::model::{AcquisitionParams, Laterality, View};

pub const DIETS: &[&str] = &["low_fat", "med", "std", "veg"];
pub const HISTORIES: &[&str] = &["benign_cyst", "mastalgia", "none", "prior_biopsy"];

/// How pixel data is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelStyle {
    /// Elliptical breast phantom with tissue texture and bright specks.
    Phantom,
    /// Uniform random bytes; cheap for large blobs.
    Noise,
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub seed: u64,
    pub sites: Vec<String>,
    /// Total number of images to produce.
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub bits: u8,
    pub pixels: PixelStyle,
    /// Prefix of every identifying string, so leaks can be searched for.
    pub sentinel: String,
}

impl SynthOptions {
    pub fn new(seed: u64, sites: &[&str], images: usize) -> Self {
        Self {
            seed,
            sites: sites.iter().map(|s| s.to_string()).collect(),
            images,
            width: 16,
            height: 16,
            bits: 8,
            pixels: PixelStyle::Phantom,
            sentinel: "SENTINEL".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCase {
    pub site: String,
    pub case: RawCase,
}

fn maybe<T>(rng: &mut ChaCha8Rng, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> Option<T> {
    if rng.gen_bool(0.8) {
        Some(f(rng))
    } else {
        None
    }
}

fn half_steps(rng: &mut ChaCha8Rng, lo: u32, hi: u32) -> f64 {
    rng.gen_range(lo * 2..=hi * 2) as f64 / 2.0
}

/// Breast-like phantom: dark background, an ellipse of textured tissue and a
/// few bright specks.
pub fn phantom_pixels(rng: &mut ChaCha8Rng, width: u32, height: u32, bits: u8) -> Vec<u8> {
    let max = ((1u32 << bits) - 1) as f64;
    let (cx, cy) = (0.0, height as f64 / 2.0);
    let (rx, ry) = (width as f64 * rng.gen_range(0.6..0.95), height as f64 * rng.gen_range(0.35..0.5));
    let dense = rng.gen_range(0.1..0.9);
    let mut samples = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        for x in 0..width {
            let dx = (x as f64 - cx) / rx;
            let dy = (y as f64 - cy) / ry;
            let v = if dx * dx + dy * dy <= 1.0 {
                let level = if rng.gen_bool(dense) { 0.65 } else { 0.3 };
                (level + rng.gen_range(-0.05..0.05)) * max
            } else {
                rng.gen_range(0.0..0.05) * max
            };
            samples.push(v.round().clamp(0.0, max) as u16);
        }
    }
    for _ in 0..rng.gen_range(0..6) {
        let i = rng.gen_range(0..samples.len());
        samples[i] = max as u16;
    }
    PixelMatrix::new(width, height, bits, samples).to_blob()
}

/// Background noise with scattered bright points, some of them grouped.
pub fn speckle_image(rng: &mut ChaCha8Rng, width: u32, height: u32) -> PixelMatrix {
    let mut samples: Vec<u16> = (0..width * height).map(|_| rng.gen_range(20..60)).collect();
    let mut put = |x: u32, y: u32, v: u16| samples[(y * width + x) as usize] = v;
    for _ in 0..rng.gen_range(0..12) {
        put(rng.gen_range(0..width), rng.gen_range(0..height), rng.gen_range(150..=255));
    }
    for _ in 0..rng.gen_range(0..3) {
        let (cx, cy) = (rng.gen_range(0..width), rng.gen_range(0..height));
        for _ in 0..rng.gen_range(2..6) {
            let x = (cx + rng.gen_range(0..10)).min(width - 1);
            let y = (cy + rng.gen_range(0..10)).min(height - 1);
            put(x, y, rng.gen_range(150..=255));
        }
    }
    PixelMatrix::new(width, height, 8, samples)
}

/// Produces `opts.images` cases over whole patients; each patient belongs to
/// one site and has 1 to 3 exams of 1 to 4 images.
pub fn generate(opts: &SynthOptions) -> Vec<SynthCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::with_capacity(opts.images);
    let views = [
        (Laterality::Left, View::Cc),
        (Laterality::Right, View::Cc),
        (Laterality::Left, View::Mlo),
        (Laterality::Right, View::Mlo),
    ];
    let mut patient_no = 0usize;
    while out.len() < opts.images {
        patient_no += 1;
        let site = opts.sites.choose(&mut rng).expect("at least one site").clone();
        let identifying = Identifying {
            patient_name: format!("{}-NAME-{patient_no:05}", opts.sentinel),
            patient_id: format!("{}-ID-{patient_no:05}", opts.sentinel),
            birth_year: rng.gen_range(1930..=1965),
        };
        let clinical = ClinicalFields {
            hrt_use: maybe(&mut rng, |r| r.gen_bool(0.3)),
            family_history: maybe(&mut rng, |r| r.gen_bool(0.2)),
            clinical_history: maybe(&mut rng, |r| HISTORIES.choose(r).unwrap().to_string()),
            diet_code: maybe(&mut rng, |r| DIETS.choose(r).unwrap().to_string()),
            parity: maybe(&mut rng, |r| r.gen_range(0..=5)),
            height_cm: maybe(&mut rng, |r| half_steps(r, 145, 185)),
            weight_kg: maybe(&mut rng, |r| half_steps(r, 45, 100)),
        };
        let mut years: Vec<u32> = (2000..=2005).collect();
        years.shuffle(&mut rng);
        let n_exams = rng.gen_range(1..=3);
        let mut exam_years = years[..n_exams].to_vec();
        exam_years.sort_unstable();
        for year in exam_years {
            let exam_date = format!("{year}-{:02}-{:02}", rng.gen_range(1..=12), rng.gen_range(1..=28));
            let n_images = rng.gen_range(1..=4);
            for (laterality, view) in views.iter().take(n_images).cloned() {
                if out.len() >= opts.images {
                    break;
                }
                let acquisition = AcquisitionParams {
                    kvp: rng.gen_range(25..=32) as f64,
                    mas: rng.gen_range(40..=120) as f64,
                    compression_n: (rng.gen_range(10..=30) * 5) as f64,
                    thickness_mm: half_steps(&mut rng, 30, 80),
                };
                let pixels = match opts.pixels {
                    PixelStyle::Phantom => phantom_pixels(&mut rng, opts.width, opts.height, opts.bits),
                    PixelStyle::Noise => {
                        let per = if opts.bits == 8 { 1 } else { 2 };
                        let mut buf = vec![0u8; opts.width as usize * opts.height as usize * per];
                        rng.fill_bytes(&mut buf);
                        buf
                    }
                };
                out.push(SynthCase {
                    site: site.clone(),
                    case: RawCase {
                        identifying: identifying.clone(),
                        exam_date: exam_date.clone(),
                        clinical: clinical.clone(),
                        image: ImageDescriptor {
                            view,
                            laterality,
                            width: opts.width,
                            height: opts.height,
                            bits: opts.bits,
                            acquisition,
                        },
                        pixels,
                    },
                });
            }
        }
    }
    out
}

fn quote(s: &str) -> String {
    format!("'{s}'")
}

fn random_atom(rng: &mut ChaCha8Rng, sites: &[String]) -> String {
    let cmp = ["=", "!=", "<", "<=", ">", ">="];
    let op = *cmp.choose(rng).unwrap();
    match rng.gen_range(0..16) {
        0 => format!("patient.age_at_exam {op} {}", rng.gen_range(35..=76)),
        1 => {
            let lo = rng.gen_range(35..=70);
            format!("patient.age_at_exam BETWEEN {lo} AND {}", lo + rng.gen_range(0..=15))
        }
        2 => format!(
            "patient.hrt_use {} {}",
            ["=", "!="].choose(rng).unwrap(),
            if rng.gen() { "TRUE" } else { "FALSE" }
        ),
        3 => format!("patient.family_history = {}", if rng.gen() { "TRUE" } else { "FALSE" }),
        4 => format!("patient.parity {op} {}", rng.gen_range(0..=5)),
        5 => format!("patient.height_cm {op} {}", half_steps(rng, 145, 185)),
        6 => format!("patient.weight_kg {op} {:.1}", half_steps(rng, 45, 100)),
        7 => {
            let mut d = DIETS.to_vec();
            d.shuffle(rng);
            let k = rng.gen_range(1..=3);
            let items: Vec<String> = d[..k].iter().map(|s| quote(s)).collect();
            format!("patient.diet_code IN ({})", items.join(", "))
        }
        8 => format!("patient.clinical_history {op} {}", quote(HISTORIES.choose(rng).unwrap())),
        9 => format!(
            "exam.exam_year_month {op} '{}-{:02}'",
            rng.gen_range(2000..=2005),
            rng.gen_range(1..=12)
        ),
        10 => format!("exam.site_id = {}", quote(sites.choose(rng).unwrap())),
        11 => format!("patient.site_id {} {}", ["=", "!="].choose(rng).unwrap(), quote(sites.choose(rng).unwrap())),
        12 => format!("image.view = {}", quote(["CC", "MLO"].choose(rng).unwrap())),
        13 => format!("image.laterality IN ({})", quote(["L", "R"].choose(rng).unwrap())),
        14 => format!("acq.kvp {op} {}", rng.gen_range(25..=32)),
        _ => format!("acq.thickness_mm {op} {}", half_steps(rng, 30, 80)),
    }
}

/// A random conjunctive query over the fields the generator populates.
pub fn random_query(rng: &mut ChaCha8Rng, sites: &[String]) -> String {
    let entity = ["patients", "exams", "images"].choose(rng).unwrap();
    let n = rng.gen_range(1..=3);
    let atoms: Vec<String> = (0..n).map(|_| random_atom(rng, sites)).collect();
    let count = if rng.gen_bool(0.2) { " COUNT" } else { "" };
    format!("SELECT {entity} WHERE {}{count}", atoms.join(" AND "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_mgif, serialize_mgif};
    use crate::query::parse_query;

    #[test]
    fn generation_is_seeded_and_sized() {
        let opts = SynthOptions::new(5, &["a", "b"], 40);
        let a = generate(&opts);
        let b = generate(&opts);
        assert_eq!(a.len(), 40);
        assert!(a.iter().zip(&b).all(|(x, y)| x.case == y.case && x.site == y.site));
        for c in &a {
            let bytes = serialize_mgif(&c.case).unwrap();
            assert_eq!(parse_mgif(&bytes).unwrap(), c.case);
        }
    }

    #[test]
    fn random_queries_parse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sites = vec!["a".to_string(), "b".to_string()];
        for _ in 0..500 {
            let q = random_query(&mut rng, &sites);
            parse_query(&q).unwrap_or_else(|e| panic!("{q}: {e}"));
        }
    }
}
