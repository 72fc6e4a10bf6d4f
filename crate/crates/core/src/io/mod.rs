//! Little-endian binary files: policy checkpoints (`SQILCKPT`), expert
//! datasets (`SQILDATA`), SIS caches (`SQILSIS1`) and exported integer models
//! (`SQILQMOD`). Every reader rejects wrong magic, unknown versions and
//! truncated or inconsistent payloads with a format error.

mod bin;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use bin::{Reader, Writer};

use crate::envs::{EnvId, ExpertDataset, ObsMode, Trajectory};
use crate::error::{Error, Result};
use crate::nn::{Dense, MlpPolicy, Policy, Tensor2D};
use crate::qkernels::{Int8Matrix, PackedInt4Matrix, QuantizedLayer, QuantizedModel, QuantizedWeights};
use crate::quant::{FakeQuantPolicy, QuantParams, QuantSpec};
use crate::saliency::{PerturbationMode, PerturbationSpec, SisConfig, SisTable};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SQILCKPT";
pub const DATASET_MAGIC: &[u8; 8] = b"SQILDATA";
pub const SIS_MAGIC: &[u8; 8] = b"SQILSIS1";
pub const QMODEL_MAGIC: &[u8; 8] = b"SQILQMOD";
pub const VERSION: u16 = 1;

/// Contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Fp(MlpPolicy),
    Quant(FakeQuantPolicy),
}

impl Checkpoint {
    pub fn base(&self) -> &MlpPolicy {
        match self {
            Checkpoint::Fp(p) => p,
            Checkpoint::Quant(q) => q.base(),
        }
    }
}

impl Policy for Checkpoint {
    fn input_dim(&self) -> usize {
        self.base().input_dim()
    }

    fn output_dim(&self) -> usize {
        self.base().output_dim()
    }

    fn act(&self, obs: &[f64]) -> Result<Vec<f64>> {
        match self {
            Checkpoint::Fp(p) => p.forward(obs),
            Checkpoint::Quant(q) => q.forward(obs),
        }
    }
}

fn header<W: Write>(w: &mut Writer<W>, magic: &[u8; 8]) -> Result<()> {
    w.bytes(magic)?;
    w.u16(VERSION)
}

fn check_header<R: Read>(r: &mut Reader<R>, magic: &[u8; 8]) -> Result<()> {
    let got = r.array::<8>()?;
    if &got != magic {
        return Err(Error::format(format!(
            "expected magic {}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    let v = r.u16()?;
    if v != VERSION {
        return Err(Error::format(format!("unsupported version {v}")));
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

// ---- checkpoints ----

pub fn write_checkpoint<W: Write>(out: W, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer::new(out);
    header(&mut w, CHECKPOINT_MAGIC)?;
    let base = ckpt.base();
    w.f64(base.action_sigma())?;
    w.u32(base.layers().len() as u32)?;
    for l in base.layers() {
        w.u32(l.input_dim() as u32)?;
        w.u32(l.output_dim() as u32)?;
    }
    for l in base.layers() {
        w.f64s(l.weight.data())?;
        w.f64s(&l.bias)?;
    }
    match ckpt {
        Checkpoint::Fp(_) => w.u8(0)?,
        Checkpoint::Quant(q) => {
            w.u8(1)?;
            w.bytes(&q.spec().code())?;
            let params = q
                .params()
                .ok_or_else(|| Error::usage("cannot save an uncalibrated quantized policy"))?;
            for g in &params.weight_scales {
                w.len_f64s(g)?;
            }
            w.len_f64s(&params.weight_grad_scale)?;
            w.len_f64s(&params.act_scales)?;
            w.len_f64s(&params.act_grad_scale)?;
        }
    }
    w.finish()
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let mut r = Reader::new(input);
    check_header(&mut r, CHECKPOINT_MAGIC)?;
    let sigma = r.f64()?;
    let n = r.count(1 << 10)?;
    let dims: Vec<(usize, usize)> = (0..n)
        .map(|_| Ok((r.count(1 << 20)?, r.count(1 << 20)?)))
        .collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(n);
    for (i, o) in dims {
        let weight = Tensor2D::from_vec(o, i, r.f64s(i.checked_mul(o).ok_or_else(|| Error::format("layer too large"))?)?)
            .map_err(|e| Error::format(e.to_string()))?;
        let bias = r.f64s(o)?;
        layers.push(Dense { weight, bias });
    }
    let base = MlpPolicy::from_layers(layers, sigma).map_err(|e| Error::format(e.to_string()))?;
    let ckpt = match r.u8()? {
        0 => Checkpoint::Fp(base),
        1 => {
            let spec = QuantSpec::from_code(r.array::<4>()?)?;
            let weight_scales = (0..n).map(|_| r.len_f64s()).collect::<Result<_>>()?;
            let params = QuantParams {
                weight_scales,
                weight_grad_scale: r.len_f64s()?,
                act_scales: r.len_f64s()?,
                act_grad_scale: r.len_f64s()?,
            };
            Checkpoint::Quant(
                FakeQuantPolicy::from_parts(base, spec, params).map_err(|e| Error::format(e.to_string()))?,
            )
        }
        x => return Err(Error::format(format!("quantization block tag {x}"))),
    };
    r.expect_eof()?;
    Ok(ckpt)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_checkpoint(create(path.as_ref())?, ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(open(path.as_ref())?)
}

/// Loads a full-precision checkpoint; quantized checkpoints are a usage error.
pub fn load_fp_policy(path: impl AsRef<Path>) -> Result<MlpPolicy> {
    match load_checkpoint(&path)? {
        Checkpoint::Fp(p) => Ok(p),
        Checkpoint::Quant(_) => Err(Error::usage(format!(
            "{} holds a quantized policy, expected full precision",
            path.as_ref().display()
        ))),
    }
}

// ---- datasets ----

/// States and actions are stored as `f32`; generated datasets are already
/// rounded to `f32`, so they round-trip exactly.
pub fn write_dataset<W: Write>(out: W, ds: &ExpertDataset) -> Result<()> {
    let mut w = Writer::new(out);
    header(&mut w, DATASET_MAGIC)?;
    w.u8(ds.env.tag())?;
    w.u8(ds.obs_mode.tag())?;
    w.u64(ds.seed)?;
    w.u32(ds.state_dim() as u32)?;
    w.u32(ds.action_dim() as u32)?;
    w.u32(ds.trajectories.len() as u32)?;
    for tr in &ds.trajectories {
        w.u64(tr.episode_seed)?;
        w.u32(tr.len() as u32)?;
        for t in 0..tr.len() {
            w.f32s(tr.state(t))?;
            w.f32s(tr.action(t))?;
        }
        w.u8(tr.success as u8)?;
    }
    w.finish()
}

pub fn read_dataset<R: Read>(input: R) -> Result<ExpertDataset> {
    let mut r = Reader::new(input);
    check_header(&mut r, DATASET_MAGIC)?;
    let env = EnvId::from_tag(r.u8()?).map_err(|e| Error::format(e.to_string()))?;
    let obs_mode = ObsMode::from_tag(r.u8()?).map_err(|e| Error::format(e.to_string()))?;
    let seed = r.u64()?;
    let sd = r.count(1 << 16)?;
    let ad = r.count(1 << 10)?;
    let n = r.count(1 << 24)?;
    let mut trajectories = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let mut tr = Trajectory::new(r.u64()?, sd, ad);
        let len = r.count(1 << 24)?;
        for _ in 0..len {
            let s = r.f32s(sd)?;
            let a = r.f32s(ad)?;
            tr.push(&s, &a);
        }
        tr.success = match r.u8()? {
            0 => false,
            1 => true,
            x => return Err(Error::format(format!("success flag {x}"))),
        };
        trajectories.push(tr);
    }
    r.expect_eof()?;
    let ds = ExpertDataset {
        env,
        obs_mode,
        seed,
        trajectories,
    };
    ds.validate().map_err(|e| Error::format(e.to_string()))?;
    Ok(ds)
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &ExpertDataset) -> Result<()> {
    write_dataset(create(path.as_ref())?, ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ExpertDataset> {
    read_dataset(open(path.as_ref())?)
}

// ---- SIS caches ----

pub fn write_sis<W: Write>(out: W, table: &SisTable) -> Result<()> {
    let mut w = Writer::new(out);
    header(&mut w, SIS_MAGIC)?;
    let c = &table.config;
    match c.perturbation.mode {
        PerturbationMode::VectorNoise { sigma } => {
            w.u8(0)?;
            w.f64(sigma)?;
        }
        PerturbationMode::ImageBlur { grid, radius } => {
            w.u8(1)?;
            w.u32(grid as u32)?;
            w.u32(radius as u32)?;
        }
    }
    w.u64(c.perturbation.seed)?;
    w.u32(c.frame_stride as u32)?;
    w.f64(c.top_p)?;
    w.f64(c.beta)?;
    w.f64(table.threshold)?;
    w.u32(table.values.len() as u32)?;
    for (v, computed) in table.values.iter().zip(&table.computed) {
        w.u32(v.len() as u32)?;
        w.u32(*computed as u32)?;
    }
    for v in &table.values {
        w.f64s(v)?;
    }
    w.finish()
}

pub fn read_sis<R: Read>(input: R) -> Result<SisTable> {
    let mut r = Reader::new(input);
    check_header(&mut r, SIS_MAGIC)?;
    let mode = match r.u8()? {
        0 => PerturbationMode::VectorNoise { sigma: r.f64()? },
        1 => PerturbationMode::ImageBlur {
            grid: r.count(1 << 16)?,
            radius: r.count(1 << 16)?,
        },
        x => return Err(Error::format(format!("perturbation tag {x}"))),
    };
    let perturbation = PerturbationSpec { mode, seed: r.u64()? };
    let config = SisConfig {
        perturbation,
        frame_stride: r.count(1 << 24)?,
        top_p: r.f64()?,
        beta: r.f64()?,
    };
    let threshold = r.f64()?;
    let n = r.count(1 << 24)?;
    let shape: Vec<(usize, usize)> = (0..n)
        .map(|_| Ok((r.count(1 << 24)?, r.count(1 << 24)?)))
        .collect::<Result<_>>()?;
    let values: Vec<Vec<f64>> = shape.iter().map(|(t, _)| r.f64s(*t)).collect::<Result<_>>()?;
    r.expect_eof()?;
    let flags = values
        .iter()
        .map(|v| v.iter().map(|x| *x > threshold).collect())
        .collect();
    Ok(SisTable {
        config,
        values,
        threshold,
        flags,
        computed: shape.iter().map(|(_, c)| *c).collect(),
    })
}

pub fn save_sis(path: impl AsRef<Path>, table: &SisTable) -> Result<()> {
    write_sis(create(path.as_ref())?, table)
}

pub fn load_sis(path: impl AsRef<Path>) -> Result<SisTable> {
    read_sis(open(path.as_ref())?)
}

// ---- exported integer models ----

pub fn write_qmodel<W: Write>(out: W, m: &QuantizedModel) -> Result<()> {
    let mut w = Writer::new(out);
    header(&mut w, QMODEL_MAGIC)?;
    w.bytes(&m.spec.code())?;
    w.f64(m.action_sigma)?;
    w.u32(m.layers.len() as u32)?;
    for l in &m.layers {
        w.u32(l.weights.rows() as u32)?;
        w.u32(l.weights.cols() as u32)?;
        match &l.weights {
            QuantizedWeights::Int8(q) => {
                w.u8(8)?;
                w.bytes(&q.data().iter().map(|v| *v as u8).collect::<Vec<_>>())?;
            }
            QuantizedWeights::Int4(q) => {
                w.u8(4)?;
                w.bytes(q.bytes())?;
            }
        }
        w.f64s(l.weights.scales())?;
        w.f64s(&l.bias)?;
        match l.input_scale {
            Some(g) => {
                w.u8(1)?;
                w.f64(g)?;
            }
            None => w.u8(0)?,
        }
    }
    w.finish()
}

pub fn read_qmodel<R: Read>(input: R) -> Result<QuantizedModel> {
    let mut r = Reader::new(input);
    check_header(&mut r, QMODEL_MAGIC)?;
    let spec = QuantSpec::from_code(r.array::<4>()?)?;
    let action_sigma = r.f64()?;
    let n = r.count(1 << 10)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = r.count(1 << 20)?;
        let cols = r.count(1 << 20)?;
        let size = rows.checked_mul(cols).ok_or_else(|| Error::format("layer too large"))?;
        let kind = r.u8()?;
        let buf = match kind {
            8 => r.bytes(size)?,
            4 => r.bytes(rows * cols.div_ceil(2))?,
            x => return Err(Error::format(format!("weight storage tag {x}"))),
        };
        let scales = r.f64s(rows)?;
        let weights = if kind == 8 {
            QuantizedWeights::Int8(Int8Matrix::new(rows, cols, buf.iter().map(|b| *b as i8).collect(), scales)?)
        } else {
            QuantizedWeights::Int4(PackedInt4Matrix::from_bytes(rows, cols, buf, scales)?)
        };
        let bias = r.f64s(rows)?;
        let input_scale = match r.u8()? {
            0 => None,
            1 => Some(r.f64()?),
            x => return Err(Error::format(format!("activation scale tag {x}"))),
        };
        layers.push(QuantizedLayer {
            weights,
            bias,
            input_scale,
        });
    }
    r.expect_eof()?;
    let m = QuantizedModel {
        spec,
        action_sigma,
        layers,
    };
    m.validate().map_err(|e| Error::format(e.to_string()))?;
    Ok(m)
}

pub fn save_qmodel(path: impl AsRef<Path>, m: &QuantizedModel) -> Result<()> {
    write_qmodel(create(path.as_ref())?, m)
}

pub fn load_qmodel(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    read_qmodel(open(path.as_ref())?)
}
