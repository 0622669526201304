//! Full forward pass per pyramid scale: local spectra, frequency-domain
//! alignment, guidance, frequency-guided spatial alignment and fusion.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneParams, LevelWeights, PyramidFeatures, DEFAULT_CHANNELS, DILATIONS};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::fgsa::{fgsa_forward, identity_w_k, FgsaParams};
use crate::io;
use crate::lfca::{align_all, cross_attend, reconstruct_aligned, AttentionWeights, LfcaParams};
use crate::lfgm::{guidance_vectors, project_guidance, GuidanceMap, CHANNEL_NAMES, GUIDANCE_CHANNELS};
use crate::params::{ParamStore, Tensor};
use crate::rng::XorShift64Star;
use crate::spectral::{local_spectra, PatchGrid};
use crate::tensor::{area_downsample, pad_to_multiple, ConvWeights, FeatureMap};

/// Hidden width of the offset predictor.
pub const OFFSET_HIDDEN: usize = 16;

pub const STAGES: [&str; 6] = ["backbone", "spectra", "lfca", "lfgm", "fgsa", "total"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Wall-clock milliseconds per stage, summed over scales.
    pub stages_ms: BTreeMap<String, f64>,
}

impl Timing {
    fn add(&mut self, stage: &str, since: Instant) {
        *self.stages_ms.entry(stage.to_string()).or_default() += since.elapsed().as_secs_f64() * 1e3;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub fused: Vec<FeatureMap>,
    pub guidance: Vec<GuidanceMap>,
    pub aligned: Vec<FeatureMap>,
    pub timing: Timing,
}

/// All learnable quantities of the pipeline, resolved per scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone_rgb: BackboneParams,
    pub backbone_thermal: BackboneParams,
    pub lfca: Vec<LfcaParams>,
    pub fgsa: Vec<FgsaParams>,
}

impl ModelParams {
    pub fn from_store(store: &ParamStore, config: &Config) -> Result<Self> {
        let scales = config.scales;
        let lfca = (0..scales)
            .map(|s| LfcaParams::from_store(store, s))
            .collect::<Result<Vec<_>>>()?;
        let fgsa = (0..scales)
            .map(|s| FgsaParams::from_store(store, s))
            .collect::<Result<Vec<_>>>()?;
        for (s, (l, f)) in lfca.iter().zip(&fgsa).enumerate() {
            if f.points != config.k_s {
                return Err(Error::Param(format!("scale {s}: weights have {} sampling points, config k_s = {}", f.points, config.k_s)));
            }
            if l.attention.channels != f.channels() {
                return Err(Error::Param(format!(
                    "scale {s}: attention width {} differs from fusion width {}",
                    l.attention.channels,
                    f.channels()
                )));
            }
        }
        Ok(Self {
            backbone_rgb: BackboneParams::from_store(store, "rgb", scales)?,
            backbone_thermal: BackboneParams::from_store(store, "thermal", scales)?,
            lfca,
            fgsa,
        })
    }

    pub fn to_store(&self, config: &Config) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.backbone_rgb.insert_into(&mut store, "rgb")?;
        self.backbone_thermal.insert_into(&mut store, "thermal")?;
        for (s, (l, f)) in self.lfca.iter().zip(&self.fgsa).enumerate() {
            l.insert_into(&mut store, s)?;
            f.insert_into(&mut store, s)?;
        }
        store.set_metadata("patch_size", config.patch_size as f64);
        store.set_metadata("stride", config.stride as f64);
        store.set_metadata("k_s", config.k_s as f64);
        store.set_metadata("eps", config.eps);
        store.set_metadata("cutoff_rho", config.cutoff_rho);
        Ok(store)
    }
}

fn uniform_conv(rng: &mut XorShift64Star, k: usize, cin: usize, cout: usize) -> ConvWeights {
    let bound = (6.0 / (k * k * cin) as f64).sqrt();
    let weights = (0..k * k * cin * cout).map(|_| rng.uniform(-bound, bound) as f32).collect();
    ConvWeights {
        kh: k,
        kw: k,
        cin,
        cout,
        weights,
        bias: vec![0.0; cout],
    }
}

fn uniform_vec(rng: &mut XorShift64Star, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect()
}

/// Deterministic initialization: He-uniform convolutions, zero offset
/// projection, identity deformable weights, `α = β = 0.5`.
pub fn default_params(config: &Config, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let c = DEFAULT_CHANNELS;
    let d = config.embed_dim;
    let mut rng = XorShift64Star::new(seed);
    let backbone = |cin: usize, rng: &mut XorShift64Star| BackboneParams {
        levels: (0..config.scales)
            .map(|s| LevelWeights {
                stem: uniform_conv(rng, 3, if s == 0 { cin } else { c }, c),
                atrous: DILATIONS.map(|_| {
                    let mut w = uniform_conv(rng, 3, c, c);
                    // Three summed branches: keep the output scale comparable to one.
                    w.weights.iter_mut().for_each(|v| *v /= 3.0f32.sqrt());
                    w
                }),
            })
            .collect(),
    };
    let backbone_rgb = backbone(3, &mut rng);
    let backbone_thermal = backbone(1, &mut rng);
    let mut lfca = Vec::new();
    let mut fgsa = Vec::new();
    for _ in 0..config.scales {
        lfca.push(LfcaParams {
            alpha_raw: 0.0,
            beta_raw: 0.0,
            attention: AttentionWeights::new(
                c,
                1,
                d,
                uniform_vec(&mut rng, c * d, c),
                uniform_vec(&mut rng, 2 * d, 1),
                uniform_vec(&mut rng, d * c, d),
            )?,
        });
        fgsa.push(FgsaParams {
            gate: uniform_conv(&mut rng, 1, 2 * c, GUIDANCE_CHANNELS),
            offset_conv1: uniform_conv(&mut rng, 3, 2 * c + GUIDANCE_CHANNELS, OFFSET_HIDDEN),
            offset_conv2: uniform_conv(&mut rng, 3, OFFSET_HIDDEN, OFFSET_HIDDEN),
            offset_proj: ConvWeights::zeros(1, 1, OFFSET_HIDDEN, 2 * config.k_s),
            w_k: identity_w_k(config.k_s, c)?,
            points: config.k_s,
            fuse_rt: uniform_conv(&mut rng, 3, 2 * c, c),
            fuse_tr: uniform_conv(&mut rng, 3, 2 * c, c),
        });
    }
    Ok(ModelParams {
        backbone_rgb,
        backbone_thermal,
        lfca,
        fgsa,
    })
}

/// Per-modality single-channel inputs to the spectral branch at each scale:
/// the padded image area-averaged down to the scale's resolution.
pub fn spectral_inputs(image: &FeatureMap, scales: usize) -> Result<Vec<FeatureMap>> {
    let padded = pad_to_multiple(image, backbone::PAD_MULTIPLE);
    (0..scales)
        .map(|s| Ok(area_downsample(&padded, 1 << s)?.with_scale(s)))
        .collect()
}

fn check_pyramid(name: &str, pyr: &PyramidFeatures, height: usize, width: usize, scales: usize) -> Result<()> {
    if pyr.len() != scales {
        return Err(Error::shape("pipeline", format!("{scales} {name} feature levels"), pyr.len()));
    }
    for (s, level) in pyr.levels.iter().enumerate() {
        if (level.height(), level.width()) != (height >> s, width >> s) {
            return Err(Error::shape(
                "pipeline",
                format!("{name} level {s} of {}x{}", height >> s, width >> s),
                format!("{}x{}", level.height(), level.width()),
            ));
        }
    }
    Ok(())
}

/// Precomputed spatial features that replace the built-in backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalFeatures {
    pub rgb: PyramidFeatures,
    pub thermal: PyramidFeatures,
}

impl ExternalFeatures {
    /// Reads tensors `rgb.{s}` and `thermal.{s}` (shape `[H, W, C]`) from a
    /// weight-format manifest.
    pub fn load(manifest: &Path, scales: usize) -> Result<Self> {
        let store = ParamStore::load(manifest)?;
        let read = |m: &str| -> Result<PyramidFeatures> {
            let levels = (0..scales)
                .map(|s| {
                    let t = store.get(&format!("{m}.{s}"))?;
                    let [h, w, c] = t.shape[..] else {
                        return Err(Error::Format(format!("{m}.{s} must have shape [H, W, C], got {:?}", t.shape)));
                    };
                    Ok(FeatureMap::new(h, w, c, t.data.clone())?.with_scale(s))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PyramidFeatures { levels })
        };
        Ok(Self {
            rgb: read("rgb")?,
            thermal: read("thermal")?,
        })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let mut store = ParamStore::new();
        for (m, pyr) in [("rgb", &self.rgb), ("thermal", &self.thermal)] {
            for (s, level) in pyr.levels.iter().enumerate() {
                let (h, w, c) = level.dims();
                store.insert(format!("{m}.{s}"), Tensor::new(vec![h, w, c], level.data().to_vec())?)?;
            }
        }
        store.save(dir, stem)
    }
}

/// Runs the full pipeline on a registered RGB (3-channel) / thermal
/// (1-channel) pair of equal size.
pub fn run(rgb: &FeatureMap, thermal: &FeatureMap, params: &ModelParams, config: &Config) -> Result<FusionResult> {
    run_with_features(rgb, thermal, params, config, None)
}

pub fn run_with_features(
    rgb: &FeatureMap,
    thermal: &FeatureMap,
    params: &ModelParams,
    config: &Config,
    external: Option<&ExternalFeatures>,
) -> Result<FusionResult> {
    config.validate()?;
    if (rgb.height(), rgb.width()) != (thermal.height(), thermal.width()) {
        return Err(Error::InvalidArgument(format!(
            "RGB is {}x{} but thermal is {}x{}; register and resize both modalities to a common size first",
            rgb.height(),
            rgb.width(),
            thermal.height(),
            thermal.width()
        )));
    }
    if rgb.channels() != 3 || thermal.channels() != 1 {
        return Err(Error::shape(
            "pipeline",
            "3-channel RGB and 1-channel thermal",
            format!("{} and {} channels", rgb.channels(), thermal.channels()),
        ));
    }
    backbone::check_input_size(rgb.height(), rgb.width())?;
    if params.lfca.len() < config.scales || params.fgsa.len() < config.scales {
        return Err(Error::Param(format!("weights cover fewer than {} scales", config.scales)));
    }

    let mut timing = Timing::default();
    let start = Instant::now();

    let t = Instant::now();
    let (ph, pw) = backbone::padded_dims(rgb.height(), rgb.width());
    let computed;
    let (feat_r, feat_t) = match external {
        Some(ext) => (&ext.rgb, &ext.thermal),
        None => {
            computed = (
                backbone::extract_features(rgb, &params.backbone_rgb)?,
                backbone::extract_features(thermal, &params.backbone_thermal)?,
            );
            (&computed.0, &computed.1)
        }
    };
    check_pyramid("rgb", feat_r, ph, pw, config.scales)?;
    check_pyramid("thermal", feat_t, ph, pw, config.scales)?;
    timing.add("backbone", t);

    let luma_r = spectral_inputs(&backbone::luma(rgb)?, config.scales)?;
    let luma_t = spectral_inputs(thermal, config.scales)?;

    let mut fused = Vec::with_capacity(config.scales);
    let mut guidance = Vec::with_capacity(config.scales);
    let mut aligned = Vec::with_capacity(config.scales);
    for s in 0..config.scales {
        let (f_r, f_t) = (&feat_r.levels[s], &feat_t.levels[s]);

        let t = Instant::now();
        let grid = PatchGrid::new(ph >> s, pw >> s, config.patch_size, config.stride)?;
        let spec_r = local_spectra(&luma_r[s], &grid)?;
        let spec_t = local_spectra(&luma_t[s], &grid)?;
        timing.add("spectra", t);

        let t = Instant::now();
        let lp = &params.lfca[s];
        let aligned_spectra = align_all(&spec_r, &spec_t, lp.alpha(), lp.beta(), config.eps)?;
        let f_align = reconstruct_aligned(&aligned_spectra, &grid)?.with_scale(s);
        let f_r_x = cross_attend(f_r, &f_align, &lp.attention)?;
        let f_t_x = cross_attend(f_t, &f_align, &lp.attention)?;
        timing.add("lfca", t);

        let t = Instant::now();
        let vectors = guidance_vectors(&spec_r, &spec_t, config.cutoff_rho)?;
        let g = project_guidance(&vectors, &grid)?;
        let g = GuidanceMap::new(g.into_map().with_scale(s))?;
        timing.add("lfgm", t);

        let t = Instant::now();
        let out = fgsa_forward(f_r, f_t, &f_r_x, &f_t_x, &g, &params.fgsa[s], config.clamp_px)?;
        timing.add("fgsa", t);

        for (name, m) in [("aligned", &f_align), ("fused", &out.fused), ("guidance", g.as_map())] {
            if !m.all_finite() {
                return Err(Error::Numeric(format!("non-finite values in {name} map at scale {s}")));
            }
        }
        fused.push(out.fused.with_scale(s));
        guidance.push(g);
        aligned.push(f_align);
    }
    timing.add("total", start);
    Ok(FusionResult {
        fused,
        guidance,
        aligned,
        timing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub name: String,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

pub fn channel_stats(g: &GuidanceMap) -> Vec<ChannelStats> {
    let map = g.as_map();
    CHANNEL_NAMES
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let ch = map.channel(c);
            let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for &v in ch.data() {
                let v = v as f64;
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v;
            }
            ChannelStats {
                name: name.to_string(),
                min: lo,
                mean: sum / ch.data().len().max(1) as f64,
                max: hi,
            }
        })
        .collect()
}

/// Display range used when writing each guidance channel as an image.
pub fn channel_range(c: usize) -> (f32, f32) {
    match c {
        0 | 1 => (-1.0, 1.0),
        2 => (0.0, std::f32::consts::PI),
        _ => (0.0, 1.0),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes one scale's guidance as six PNGs `guidance_s{scale}_{channel}.png`.
pub fn write_guidance_pngs(g: &GuidanceMap, scale: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    (0..GUIDANCE_CHANNELS)
        .map(|c| {
            let path = dir.join(format!("guidance_s{scale}_{}.png", CHANNEL_NAMES[c]));
            let (lo, hi) = channel_range(c);
            io::save_gray8(&g.channel(c), &path, lo, hi)?;
            Ok(path)
        })
        .collect()
}

pub fn write_guidance_summary(guidance: &[GuidanceMap], path: &Path) -> Result<()> {
    let summary: BTreeMap<String, Vec<ChannelStats>> = guidance
        .iter()
        .enumerate()
        .map(|(s, g)| (format!("scale_{s}"), channel_stats(g)))
        .collect();
    write_json(path, &summary)
}

pub const FEATURES_STEM: &str = "features";

/// Writes fused features (`features.json` + `features.bin`), guidance PNGs
/// and summary, and `timing.json` into `dir`, creating it if needed.
pub fn export(result: &FusionResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut store = ParamStore::new();
    for (s, m) in result.fused.iter().enumerate() {
        let (h, w, c) = m.dims();
        store.insert(format!("fused.{s}"), Tensor::new(vec![h, w, c], m.data().to_vec())?)?;
    }
    store.set_metadata("scales", result.fused.len() as f64);
    store.save(dir, FEATURES_STEM)?;
    for (s, g) in result.guidance.iter().enumerate() {
        write_guidance_pngs(g, s, dir)?;
    }
    write_guidance_summary(&result.guidance, &dir.join("guidance_summary.json"))?;
    write_json(&dir.join("timing.json"), &result.timing)
}

/// Reads the fused pyramid written by [`export`].
pub fn import_fused(dir: &Path) -> Result<Vec<FeatureMap>> {
    let store = ParamStore::load(&dir.join(format!("{FEATURES_STEM}.json")))?;
    let mut out = Vec::new();
    for s in 0.. {
        let name = format!("fused.{s}");
        if !store.contains(&name) {
            break;
        }
        let t = store.get(&name)?;
        let [h, w, c] = t.shape[..] else {
            return Err(Error::Format(format!("{name} must have shape [H, W, C]")));
        };
        out.push(FeatureMap::new(h, w, c, t.data.clone())?.with_scale(s));
    }
    Ok(out)
}
