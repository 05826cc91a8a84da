//! Synthetic paired dataset: multi-channel signal windows, per-class semantic
//! anchors, and per-item target latents for the diffusion stage.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{self, Header};
use crate::error::{Error, Result};
use crate::filter;

pub const DATASET_FILE: &str = "dataset.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Components in each class's sinusoid mixture.
const COMPONENTS: usize = 3;
const FREQ_RANGE_HZ: (f64, f64) = (8.0, 90.0);
const AMPLITUDE_RANGE: (f64, f64) = (1.0, 3.0);
const SUBJECT_GAIN_RANGE: (f64, f64) = (0.8, 1.2);
const SUBJECT_PHASE_RANGE: f64 = PI / 8.0;
/// Rejection-sampling budget for anchors when classes outnumber dimensions.
const ANCHOR_ATTEMPTS: usize = 1000;
const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub channels: usize,
    pub samples: usize,
    pub tokens: usize,
    pub width: usize,
    pub classes: usize,
    pub subjects: usize,
    /// Shape of one target latent, `[channels, height, width]`.
    pub latent: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    pub classes: usize,
    pub per_class: usize,
    pub subjects: usize,
    pub channels: usize,
    pub samples: usize,
    pub tokens: usize,
    pub width: usize,
    pub latent: [usize; 3],
    pub seed: u64,
    pub fs: f64,
    pub noise_std: f64,
    /// Ceiling on the cosine similarity between anchors of different classes.
    pub anchor_ceiling: f64,
    /// Spread of text-token rows around the class image direction.
    pub text_spread: f64,
    /// Std of the per-item offset around each class latent anchor.
    pub latent_jitter: f64,
    /// Split ratios `(train, val, test)`; `test = 0` gives a two-way split.
    pub split: [f64; 3],
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 20,
            subjects: 3,
            channels: 16,
            samples: 64,
            tokens: 8,
            width: 32,
            latent: [4, 8, 8],
            seed: 7,
            fs: 1000.0,
            noise_std: 0.5,
            anchor_ceiling: 0.3,
            text_spread: 0.5,
            latent_jitter: 0.2,
            split: [0.8, 0.1, 0.1],
        }
    }
}

impl GenerateOptions {
    pub fn dims(&self) -> Dims {
        Dims {
            channels: self.channels,
            samples: self.samples,
            tokens: self.tokens,
            width: self.width,
            classes: self.classes,
            subjects: self.subjects,
            latent: self.latent,
        }
    }

    /// Ratios used when none are configured: 9:1 for one subject, 8:1:1 otherwise.
    pub fn default_split(subjects: usize) -> [f64; 3] {
        if subjects == 1 {
            [0.9, 0.1, 0.0]
        } else {
            [0.8, 0.1, 0.1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class < 2 {
            return Err(Error::Config(
                "need at least 2 classes and 2 items per class".into(),
            ));
        }
        let dims = [self.channels, self.samples, self.tokens, self.width];
        if dims.iter().any(|&d| d < 2) || self.subjects == 0 || self.latent.contains(&0) {
            return Err(Error::Config(format!(
                "all dimensions must be at least 2: {dims:?}"
            )));
        }
        if self.classes > self.channels * 4 {
            return Err(Error::Config(format!(
                "{} classes cannot be distinguished with {} channels (max {})",
                self.classes,
                self.channels,
                self.channels * 4
            )));
        }
        if !(self.fs > 2.0 * (filter::BAND_HI_HZ + filter::TRANSITION_HZ)) {
            return Err(Error::Config(format!(
                "sampling rate {} Hz too low for the band",
                self.fs
            )));
        }
        let total: f64 = self.split.iter().sum();
        if self.split.iter().any(|r| *r < 0.0) || (total - 1.0).abs() > 1e-9 || self.split[0] <= 0.0
        {
            return Err(Error::Config(format!(
                "split ratios {:?} must be non-negative and sum to 1",
                self.split
            )));
        }
        if !(self.anchor_ceiling > 0.0 && self.anchor_ceiling < 1.0) {
            return Err(Error::Config("anchor ceiling must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One preprocessed `(C, S)` window.
#[derive(Clone, Debug, PartialEq)]
pub struct EegWindow {
    pub values: Tensor,
    pub label: usize,
    pub subject: usize,
}

/// Stand-in text/image embedding pair for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticAnchor {
    pub class: usize,
    /// `(T, D)`.
    pub text_embedding: Tensor,
    /// Unit-norm `D`-vector.
    pub image_embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dims: Dims,
    pub fs: f64,
    pub seed: u64,
    pub total: usize,
    pub counts: BTreeMap<String, usize>,
    pub splits: Splits,
    pub data_file: String,
    /// Byte offset of each record within the data file.
    pub offsets: BTreeMap<String, u64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub windows: Vec<EegWindow>,
    pub anchors: Vec<SemanticAnchor>,
    /// Per-item target latents `[N, c, h, w]`.
    pub latents: Tensor,
    /// Per-class latent centres `[K, c, h, w]`.
    pub latent_anchors: Tensor,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (norm(a) * norm(b)).max(1e-300)
}

/// Unit vectors with pairwise |cos| <= `ceiling`: Gram–Schmidt when `k <= d`,
/// rejection sampling otherwise.
fn anchor_directions(
    rng: &mut ChaCha8Rng,
    k: usize,
    d: usize,
    ceiling: f64,
) -> Result<Vec<Vec<f64>>> {
    if k <= d {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
        while out.len() < k {
            let mut v = normal_vec(rng, d);
            for u in &out {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = norm(&v);
            if n > 1e-6 {
                out.push(v.iter().map(|x| x / n).collect());
            }
        }
        return Ok(out);
    }
    for _ in 0..ANCHOR_ATTEMPTS {
        let cand: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let v = normal_vec(rng, d);
                let n = norm(&v);
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        let ok = (0..k).all(|i| (i + 1..k).all(|j| cosine(&cand[i], &cand[j]).abs() <= ceiling));
        if ok {
            return Ok(cand);
        }
    }
    Err(Error::Config(format!(
        "could not place {k} anchors in {d} dimensions under cosine ceiling {ceiling}"
    )))
}

fn make_anchors(rng: &mut ChaCha8Rng, o: &GenerateOptions) -> Result<Vec<SemanticAnchor>> {
    for _ in 0..ANCHOR_ATTEMPTS {
        let dirs = anchor_directions(rng, o.classes, o.width, o.anchor_ceiling)?;
        let anchors: Vec<SemanticAnchor> = dirs
            .into_iter()
            .enumerate()
            .map(|(class, image)| {
                let mut text = Vec::with_capacity(o.tokens * o.width);
                for _ in 0..o.tokens {
                    let noise = normal_vec(rng, o.width);
                    let nn = norm(&noise);
                    let row: Vec<f64> = image
                        .iter()
                        .zip(&noise)
                        .map(|(a, b)| a + o.text_spread * b / nn)
                        .collect();
                    let rn = norm(&row);
                    text.extend(row.iter().map(|x| x / rn));
                }
                SemanticAnchor {
                    class,
                    text_embedding: Tensor::new([o.tokens, o.width], text).expect("text shape"),
                    image_embedding: image,
                }
            })
            .collect();
        let text_ok = (0..anchors.len()).all(|i| {
            (i + 1..anchors.len()).all(|j| {
                cosine(
                    anchors[i].text_embedding.data(),
                    anchors[j].text_embedding.data(),
                )
                .abs()
                    <= o.anchor_ceiling
            })
        });
        if text_ok {
            return Ok(anchors);
        }
    }
    Err(Error::Config(
        "text anchors violate the cosine ceiling; widen the embedding".into(),
    ))
}

struct ClassSignal {
    freqs: [f64; COMPONENTS],
    /// `[component][channel]`.
    amps: Vec<Vec<f64>>,
    phases: Vec<Vec<f64>>,
}

/// Stratified split of item indices, reproducible from `seed`.
pub fn stratified_split(labels: &[usize], classes: usize, ratios: [f64; 3], seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    let mut s = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for k in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut n_val = (ratios[1] * n as f64).round() as usize;
        let mut n_test = (ratios[2] * n as f64).round() as usize;
        while n_val + n_test >= n && (n_val > 0 || n_test > 0) {
            if n_test >= n_val && n_test > 0 {
                n_test -= 1;
            } else {
                n_val -= 1;
            }
        }
        s.val.extend_from_slice(&idx[..n_val]);
        s.test.extend_from_slice(&idx[n_val..n_val + n_test]);
        s.train.extend_from_slice(&idx[n_val + n_test..]);
    }
    s.train.sort_unstable();
    s.val.sort_unstable();
    s.test.sort_unstable();
    s
}

/// Generates the full dataset in memory. Deterministic in `options.seed`.
pub fn generate(o: &GenerateOptions) -> Result<Dataset> {
    o.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let anchors = make_anchors(&mut rng, o)?;

    let classes: Vec<ClassSignal> = (0..o.classes)
        .map(|_| {
            let mut freqs = [0.0; COMPONENTS];
            freqs
                .iter_mut()
                .for_each(|f| *f = rng.random_range(FREQ_RANGE_HZ.0..FREQ_RANGE_HZ.1));
            let amps = (0..COMPONENTS)
                .map(|_| {
                    (0..o.channels)
                        .map(|_| rng.random_range(AMPLITUDE_RANGE.0..AMPLITUDE_RANGE.1))
                        .collect()
                })
                .collect();
            let phases = (0..COMPONENTS)
                .map(|_| {
                    (0..o.channels)
                        .map(|_| rng.random_range(0.0..2.0 * PI))
                        .collect()
                })
                .collect();
            ClassSignal {
                freqs,
                amps,
                phases,
            }
        })
        .collect();
    let subjects: Vec<(Vec<f64>, Vec<f64>)> = (0..o.subjects)
        .map(|_| {
            let gain = (0..o.channels)
                .map(|_| rng.random_range(SUBJECT_GAIN_RANGE.0..SUBJECT_GAIN_RANGE.1))
                .collect();
            let phase = (0..o.channels)
                .map(|_| rng.random_range(-SUBJECT_PHASE_RANGE..SUBJECT_PHASE_RANGE))
                .collect();
            (gain, phase)
        })
        .collect();

    let [lc, lh, lw] = o.latent;
    let latent_len = lc * lh * lw;
    let latent_anchors =
        Tensor::from_fn([o.classes, lc, lh, lw], |_| StandardNormal.sample(&mut rng));

    let skip = filter::discard_samples(o.fs);
    let raw_len = skip + o.samples;
    let total = o.classes * o.per_class;
    let mut windows = Vec::with_capacity(total);
    let mut latents = Vec::with_capacity(total * latent_len);
    for item in 0..total {
        let label = item % o.classes;
        let subject = (item / o.classes) % o.subjects;
        let cls = &classes[label];
        let (gain, shift) = &subjects[subject];
        let raw = Tensor::from_fn([o.channels, raw_len], |i| {
            let (c, n) = (i / raw_len, i % raw_len);
            let t = n as f64 / o.fs;
            let clean: f64 = (0..COMPONENTS)
                .map(|j| {
                    cls.amps[j][c]
                        * (2.0 * PI * cls.freqs[j] * t + cls.phases[j][c] + shift[c]).sin()
                })
                .sum();
            gain[c] * clean
        });
        let mut noisy = raw;
        for v in noisy.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += o.noise_std * z;
        }
        let values = filter::preprocess(&noisy, o.fs, o.samples)?;
        windows.push(EegWindow {
            values,
            label,
            subject,
        });
        let centre = &latent_anchors.data()[label * latent_len..(label + 1) * latent_len];
        for &c in centre {
            let z: f64 = StandardNormal.sample(&mut rng);
            latents.push(c + o.latent_jitter * z);
        }
    }
    let latents = Tensor::new([total, lc, lh, lw], latents)?;

    let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
    let splits = stratified_split(&labels, o.classes, o.split, o.seed);
    let counts = BTreeMap::from([
        ("train".to_string(), splits.train.len()),
        ("val".to_string(), splits.val.len()),
        ("test".to_string(), splits.test.len()),
    ]);
    let manifest = DatasetManifest {
        dims: o.dims(),
        fs: o.fs,
        seed: o.seed,
        total,
        counts,
        splits,
        data_file: DATASET_FILE.to_string(),
        offsets: BTreeMap::new(),
    };
    Ok(Dataset {
        manifest,
        windows,
        anchors,
        latents,
        latent_anchors,
    })
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.label).collect()
    }

    /// Windows at `idx` stacked as `[n, C, S]`.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = idx
            .iter()
            .map(|&i| self.windows[i].values.clone())
            .collect();
        Ok(Tensor::stack(&items)?)
    }

    /// Text anchors of the items at `idx`, `[n, T, D]`.
    pub fn text_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = idx
            .iter()
            .map(|&i| self.anchors[self.windows[i].label].text_embedding.clone())
            .collect();
        Ok(Tensor::stack(&items)?)
    }

    /// Image anchors of the items at `idx`, `[n, D]`.
    pub fn image_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let d = self.manifest.dims.width;
        let data = idx
            .iter()
            .flat_map(|&i| {
                self.anchors[self.windows[i].label]
                    .image_embedding
                    .iter()
                    .copied()
            })
            .collect();
        Ok(Tensor::new([idx.len(), d], data)?)
    }

    /// Target latents of the items at `idx`, `[n, c, h, w]`.
    pub fn latent_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let [c, h, w] = self.manifest.dims.latent;
        let len = c * h * w;
        let data = idx
            .iter()
            .flat_map(|&i| self.latents.data()[i * len..(i + 1) * len].iter().copied())
            .collect();
        Ok(Tensor::new([idx.len(), c, h, w], data)?)
    }

    /// All image anchors, `[K, D]`.
    pub fn image_anchors(&self) -> Tensor {
        let d = self.manifest.dims.width;
        let data = self
            .anchors
            .iter()
            .flat_map(|a| a.image_embedding.iter().copied())
            .collect();
        Tensor::new([self.anchors.len(), d], data).expect("anchor shape")
    }

    fn records(&self) -> Result<Vec<(String, Tensor)>> {
        let m = &self.manifest.dims;
        let n = self.windows.len();
        let windows = Tensor::stack(
            &self
                .windows
                .iter()
                .map(|w| w.values.clone())
                .collect::<Vec<_>>(),
        )?;
        let labels = Tensor::new([n], self.windows.iter().map(|w| w.label as f64).collect())?;
        let subjects = Tensor::new([n], self.windows.iter().map(|w| w.subject as f64).collect())?;
        let text = Tensor::stack(
            &self
                .anchors
                .iter()
                .map(|a| a.text_embedding.clone())
                .collect::<Vec<_>>(),
        )?;
        let image = self.image_anchors();
        debug_assert_eq!(text.shape(), &[m.classes, m.tokens, m.width]);
        Ok(vec![
            ("windows".into(), windows),
            ("labels".into(), labels),
            ("subjects".into(), subjects),
            ("anchors.text".into(), text),
            ("anchors.image".into(), image),
            ("latents".into(), self.latents.clone()),
            ("latent_anchors".into(), self.latent_anchors.clone()),
        ])
    }

    /// Writes the data file and manifest into `dir`.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let records = self.records()?;
        let header = Header {
            kind: "dataset".into(),
            ..Default::default()
        };
        let (bytes, offsets) =
            container::encode(&header, records.iter().map(|(k, v)| (k.as_str(), v)))?;
        container::write_atomic(&dir.join(&self.manifest.data_file), &bytes)?;
        self.manifest.offsets = offsets;
        let json = serde_json::to_string_pretty(&self.manifest)?;
        container::write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath: PathBuf = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let c = container::read(&dir.join(&manifest.data_file))?;
        let get = |name: &str| {
            c.tensors
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("dataset is missing record `{name}`")))
        };
        let d = &manifest.dims;
        let windows_t = get("windows")?;
        let labels = get("labels")?;
        let subjects = get("subjects")?;
        let text = get("anchors.text")?;
        let image = get("anchors.image")?;
        let n = manifest.total;
        if windows_t.shape() != [n, d.channels, d.samples]
            || text.shape() != [d.classes, d.tokens, d.width]
            || image.shape() != [d.classes, d.width]
        {
            return Err(Error::Format(
                "dataset records disagree with manifest dims".into(),
            ));
        }
        let windows = (0..n)
            .map(|i| {
                Ok(EegWindow {
                    values: Tensor::new([d.channels, d.samples], windows_t.row(i).to_vec())?,
                    label: labels.data()[i] as usize,
                    subject: subjects.data()[i] as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let anchors = (0..d.classes)
            .map(|k| {
                Ok(SemanticAnchor {
                    class: k,
                    text_embedding: Tensor::new([d.tokens, d.width], text.row(k).to_vec())?,
                    image_embedding: image.row(k).to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            latents: get("latents")?,
            latent_anchors: get("latent_anchors")?,
            manifest,
            windows,
            anchors,
        })
    }
}
