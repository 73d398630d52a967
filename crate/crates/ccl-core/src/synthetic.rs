//! Synthetic video-paragraph grounding benchmark.
//!
//! Each sample plants N ordered, non-overlapping events on a T-clip timeline.
//! Every event carries a latent concept vector; clips inside the event see a
//! linear image of the concept plus noise, and the matching sentence sees a
//! different linear image of the same concept. The benchmark is solvable by
//! construction (a nearest-centroid oracle recovers the planted intervals at
//! low noise), so model failures are model failures.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CclError, Result};
use crate::interval::{Interval, IntervalSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub num_test: usize,
    pub t_clips: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub n_range: (usize, usize),
    pub noise_std: f64,
    pub concept_dim: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_samples: 2000,
            num_test: 500,
            t_clips: 32,
            d_v: 32,
            d_q: 32,
            n_range: (2, 5),
            noise_std: 0.1,
            concept_dim: 8,
            labeled_fraction: 0.25,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_clips < 4 {
            return Err(CclError::InvalidConfig("T must be >= 4".into()));
        }
        if self.d_v < 2 || self.d_q < 2 || self.concept_dim < 2 {
            return Err(CclError::InvalidConfig(
                "D_v, D_q, concept_dim must be >= 2".into(),
            ));
        }
        if self.n_range.0 < 1 || self.n_range.0 > self.n_range.1 {
            return Err(CclError::InvalidConfig("bad N_range".into()));
        }
        if !(0.0 < self.labeled_fraction && self.labeled_fraction <= 1.0) {
            return Err(CclError::InvalidConfig(
                "labeled_fraction must be in (0, 1]".into(),
            ));
        }
        // Every event spans >= MIN_EVENT_CLIPS clips with >= 1 clip gap between
        // events, so N events need 2N + (N - 1) clips.
        let n_max = self.n_range.1;
        if MIN_EVENT_CLIPS * n_max + (n_max - 1) > self.t_clips {
            return Err(CclError::CannotPlaceEvents(format!(
                "N={} events need {} clips but T={}",
                n_max,
                MIN_EVENT_CLIPS * n_max + (n_max - 1),
                self.t_clips
            )));
        }
        Ok(())
    }
}

const MIN_EVENT_CLIPS: usize = 2;

/// One video-paragraph pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// T x D_v clip features.
    pub video_feats: Tensor,
    /// N x D_q sentence features.
    pub query_feats: Tensor,
    pub gt_intervals: Option<IntervalSet>,
    pub labeled: bool,
}

impl Sample {
    pub fn num_clips(&self) -> usize {
        self.video_feats.rows()
    }

    pub fn num_sentences(&self) -> usize {
        self.query_feats.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub train_labeled: Vec<Sample>,
    pub train_unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.train_labeled
            .iter()
            .chain(&self.train_unlabeled)
            .chain(&self.test)
            .find(|s| s.id == id)
    }
}

/// Per-sample generation latents, kept for oracle-style diagnostics.
pub struct SampleLatents {
    pub id: String,
    /// Per-event mean visual feature `W_v * c_i` (unnoised).
    pub visual_prototypes: Vec<Vec<f64>>,
    pub gt_intervals: IntervalSet,
}

pub struct DatasetLatents {
    pub samples: Vec<SampleLatents>,
}

/// Center of clip j on the normalized timeline.
pub fn clip_center(j: usize, t: usize) -> Result<f64> {
    if j >= t {
        return Err(CclError::IndexOutOfRange(format!("clip {j} of {t}")));
    }
    Ok((j as f64 + 0.5) / t as f64)
}

/// Round to 9 significant digits via the serialized decimal form, so that the
/// in-memory value and the dataset file agree exactly.
fn quantize9(x: f64) -> f64 {
    format_sig9(x).parse().unwrap()
}

pub(crate) fn format_sig9(x: f64) -> String {
    format!("{:.8e}", x)
}

fn draw_structure(n: usize, t: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    // Mandatory layout: N events of MIN_EVENT_CLIPS clips, 1-clip interior
    // gaps. Spare clips go into random bins: event extensions, interior gap
    // extensions, and the two (possibly empty) outer gaps.
    let mandatory = MIN_EVENT_CLIPS * n + (n - 1);
    let free = t - mandatory;
    let bins = 2 * n + 1; // n extensions + (n + 1) gaps
    let mut extra = vec![0usize; bins];
    for _ in 0..free {
        extra[rng.gen_range(0..bins)] += 1;
    }
    let mut runs = Vec::with_capacity(n);
    let mut pos = extra[n]; // leading gap is bin n
    for i in 0..n {
        if i > 0 {
            pos += 1 + extra[n + i]; // interior gap
        }
        let len = MIN_EVENT_CLIPS + extra[i];
        runs.push((pos, pos + len)); // clip range [pos, pos+len)
        pos += len;
    }
    runs
}

fn gaussian_vec(dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect()
}

fn unit_vec(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v = gaussian_vec(dim, 1.0, rng);
        let n = crate::tensor::norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn gen_sample(
    id: String,
    cfg: &SyntheticConfig,
    w_v: &Tensor,
    w_q: &Tensor,
    rng: &mut ChaCha8Rng,
) -> (Sample, SampleLatents) {
    let t = cfg.t_clips;
    let n = rng.gen_range(cfg.n_range.0..=cfg.n_range.1);
    let runs = draw_structure(n, t, rng);

    let intervals = IntervalSet(
        runs.iter()
            .map(|&(a, b)| {
                Interval::new(
                    quantize9(a as f64 / t as f64),
                    quantize9(b as f64 / t as f64),
                )
                .unwrap()
            })
            .collect(),
    );

    let concepts: Vec<Vec<f64>> = (0..n).map(|_| unit_vec(cfg.concept_dim, rng)).collect();
    let prototypes: Vec<Vec<f64>> = concepts
        .iter()
        .map(|c| {
            (0..cfg.d_v)
                .map(|r| crate::tensor::dot(w_v.row(r), c))
                .collect()
        })
        .collect();

    let mut video = Tensor::zeros(&[t, cfg.d_v]);
    for j in 0..t {
        let center = (j as f64 + 0.5) / t as f64;
        let event = intervals
            .iter()
            .position(|iv| center >= iv.start && center <= iv.end);
        let noise = gaussian_vec(cfg.d_v, cfg.noise_std, rng);
        for d in 0..cfg.d_v {
            let signal = event.map_or(0.0, |i| prototypes[i][d]);
            *video.at_mut(j, d) = quantize9(signal + noise[d]);
        }
    }

    let mut query = Tensor::zeros(&[n, cfg.d_q]);
    for (i, c) in concepts.iter().enumerate() {
        let noise = gaussian_vec(cfg.d_q, cfg.noise_std, rng);
        for d in 0..cfg.d_q {
            *query.at_mut(i, d) = quantize9(crate::tensor::dot(w_q.row(d), c) + noise[d]);
        }
    }

    let latents = SampleLatents {
        id: id.clone(),
        visual_prototypes: prototypes,
        gt_intervals: intervals.clone(),
    };
    let sample = Sample {
        id,
        video_feats: video,
        query_feats: query,
        gt_intervals: Some(intervals),
        labeled: false,
    };
    (sample, latents)
}

pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<DatasetSplit> {
    Ok(generate_dataset_with_latents(cfg)?.0)
}

pub fn generate_dataset_with_latents(
    cfg: &SyntheticConfig,
) -> Result<(DatasetSplit, DatasetLatents)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (cfg.concept_dim as f64).sqrt();
    let mut w_v = Tensor::zeros(&[cfg.d_v, cfg.concept_dim]);
    w_v.data = gaussian_vec(cfg.d_v * cfg.concept_dim, scale, &mut rng);
    let mut w_q = Tensor::zeros(&[cfg.d_q, cfg.concept_dim]);
    w_q.data = gaussian_vec(cfg.d_q * cfg.concept_dim, scale, &mut rng);

    let mut latents = Vec::new();
    let mut train: Vec<Sample> = (0..cfg.num_samples)
        .map(|i| {
            let (s, l) = gen_sample(format!("train_{i:05}"), cfg, &w_v, &w_q, &mut rng);
            latents.push(l);
            s
        })
        .collect();
    let test: Vec<Sample> = (0..cfg.num_test)
        .map(|i| {
            let (mut s, l) = gen_sample(format!("test_{i:05}"), cfg, &w_v, &w_q, &mut rng);
            latents.push(l);
            s.labeled = true;
            s
        })
        .collect();

    // Labeled subset: first labeled_fraction of a seeded shuffle of the
    // train order. Same RNG stream, so it is still a pure function of seed.
    let num_labeled = ((cfg.labeled_fraction * cfg.num_samples as f64).round() as usize)
        .clamp(1, cfg.num_samples);
    let mut order: Vec<usize> = (0..cfg.num_samples).collect();
    order.shuffle(&mut rng);
    for &idx in order.iter().take(num_labeled) {
        train[idx].labeled = true;
    }

    let mut split = DatasetSplit::default();
    for mut s in train {
        if s.labeled {
            split.train_labeled.push(s);
        } else {
            s.gt_intervals = None;
            split.train_unlabeled.push(s);
        }
    }
    split.test = test;
    Ok((split, DatasetLatents { samples: latents }))
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    config: SyntheticConfig,
    num_train_labeled: usize,
    num_train_unlabeled: usize,
    num_test: usize,
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("meta.json")
}

fn write_sample(out: &mut impl Write, s: &Sample) -> std::io::Result<()> {
    let feats = |t: &Tensor| {
        let rows: Vec<String> = (0..t.rows())
            .map(|i| {
                let vals: Vec<String> = t.row(i).iter().map(|&v| format_sig9(v)).collect();
                format!("[{}]", vals.join(","))
            })
            .collect();
        format!("[{}]", rows.join(","))
    };
    let gt = match &s.gt_intervals {
        None => "null".to_string(),
        Some(set) => {
            let ivs: Vec<String> = set
                .iter()
                .map(|iv| format!("[{},{}]", format_sig9(iv.start), format_sig9(iv.end)))
                .collect();
            format!("[{}]", ivs.join(","))
        }
    };
    writeln!(
        out,
        "{{\"id\":{},\"labeled\":{},\"T\":{},\"N\":{},\"video_feats\":{},\"query_feats\":{},\"gt_intervals\":{}}}",
        serde_json::to_string(&s.id).unwrap(),
        s.labeled,
        s.num_clips(),
        s.num_sentences(),
        feats(&s.video_feats),
        feats(&s.query_feats),
        gt
    )
}

pub fn save_dataset(split: &DatasetSplit, cfg: &SyntheticConfig, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for s in split
        .train_labeled
        .iter()
        .chain(&split.train_unlabeled)
        .chain(&split.test)
    {
        write_sample(&mut out, s)?;
    }
    out.flush()?;
    let meta = DatasetMeta {
        config: cfg.clone(),
        num_train_labeled: split.train_labeled.len(),
        num_train_unlabeled: split.train_unlabeled.len(),
        num_test: split.test.len(),
    };
    fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn parse_matrix(v: &serde_json::Value, line: usize, field: &str) -> Result<Tensor> {
    let rows = v.as_array().ok_or_else(|| CclError::Parse {
        line,
        msg: format!("{field} is not an array"),
    })?;
    let mut data = Vec::new();
    let mut cols = None;
    for row in rows {
        let row = row.as_array().ok_or_else(|| CclError::Parse {
            line,
            msg: format!("{field} row is not an array"),
        })?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(CclError::Parse {
                    line,
                    msg: format!("{field} has ragged rows"),
                })
            }
            _ => {}
        }
        for x in row {
            data.push(x.as_f64().ok_or_else(|| CclError::Parse {
                line,
                msg: format!("{field} has non-numeric entry"),
            })?);
        }
    }
    Ok(Tensor {
        shape: vec![rows.len(), cols.unwrap_or(0)],
        data,
    })
}

fn parse_sample(text: &str, line: usize) -> Result<Sample> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CclError::Parse {
            line,
            msg: e.to_string(),
        })?;
    let get = |k: &str| {
        v.get(k).ok_or_else(|| CclError::Parse {
            line,
            msg: format!("missing field {k}"),
        })
    };
    let id = get("id")?
        .as_str()
        .ok_or_else(|| CclError::Parse {
            line,
            msg: "id is not a string".into(),
        })?
        .to_string();
    let labeled = get("labeled")?.as_bool().ok_or_else(|| CclError::Parse {
        line,
        msg: "labeled is not a bool".into(),
    })?;
    let t = get("T")?.as_u64().unwrap_or(0) as usize;
    let n = get("N")?.as_u64().unwrap_or(0) as usize;
    let video_feats = parse_matrix(get("video_feats")?, line, "video_feats")?;
    let query_feats = parse_matrix(get("query_feats")?, line, "query_feats")?;
    if video_feats.rows() != t || query_feats.rows() != n {
        return Err(CclError::Parse {
            line,
            msg: "T/N fields disagree with feature shapes".into(),
        });
    }
    let gt_intervals = match get("gt_intervals")? {
        serde_json::Value::Null => None,
        serde_json::Value::Array(items) => {
            let mut set = Vec::with_capacity(items.len());
            for pair in items {
                let pair = pair.as_array().filter(|p| p.len() == 2).ok_or_else(|| {
                    CclError::Parse {
                        line,
                        msg: "gt interval is not a [start, end] pair".into(),
                    }
                })?;
                let s = pair[0].as_f64().unwrap_or(f64::NAN);
                let e = pair[1].as_f64().unwrap_or(f64::NAN);
                set.push(Interval::new(s, e).map_err(|e| CclError::Parse {
                    line,
                    msg: e.to_string(),
                })?);
            }
            if set.len() != n {
                return Err(CclError::Parse {
                    line,
                    msg: "gt_intervals length differs from N".into(),
                });
            }
            Some(IntervalSet(set))
        }
        _ => {
            return Err(CclError::Parse {
                line,
                msg: "gt_intervals is neither null nor an array".into(),
            })
        }
    };
    Ok(Sample {
        id,
        video_feats,
        query_feats,
        gt_intervals,
        labeled,
    })
}

pub fn load_dataset(path: &Path) -> Result<(DatasetSplit, SyntheticConfig)> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(meta_path(path))?)?;
    let reader = BufReader::new(fs::File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_sample(&line, i + 1)?);
    }
    let expected = meta.num_train_labeled + meta.num_train_unlabeled + meta.num_test;
    if samples.is_empty() || samples.len() != expected {
        return Err(CclError::Parse {
            line: samples.len(),
            msg: format!("expected {expected} samples, found {}", samples.len()),
        });
    }
    let rest = samples.split_off(meta.num_train_labeled);
    let train_labeled = samples;
    let mut rest = rest;
    let test = rest.split_off(meta.num_train_unlabeled);
    Ok((
        DatasetSplit {
            train_labeled,
            train_unlabeled: rest,
            test,
        },
        meta.config,
    ))
}
