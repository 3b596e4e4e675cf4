//! Self-describing JSON checkpoints for KAN and MLP models.
//!
//! Parameters are stored as nested decimal arrays (`coeffs[j][i][m]`,
//! `w_b[j][i]`, `weight[j][i]`). Floats are written in shortest round-trip
//! form, so a save -> load -> save cycle reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::config::SeedBundle;
use crate::error::{Error, Result};
use crate::kan::{KanLayer, KanModel};
use crate::mlp::{Dense, MlpModel};
use crate::numeric::Mat;
use crate::spline::{build_grid, GridSpec};
use crate::watermark::PerturbationSignal;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Clean,
    Watermarked,
    Attacked,
    Detector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: SeedBundle,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<PerturbationSignal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanLayerParams {
    pub coeffs: Vec<Vec<Vec<f64>>>,
    pub w_b: Vec<Vec<f64>>,
    pub w_s: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelParams {
    Kan {
        grid: GridSpec,
        layers: Vec<KanLayerParams>,
    },
    Mlp {
        layers: Vec<DenseParams>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub widths: Vec<usize>,
    pub model: ModelParams,
    pub provenance: Provenance,
}

fn nest<T: Clone>(flat: &[T], inner: usize) -> Vec<Vec<T>> {
    flat.chunks(inner.max(1)).map(<[T]>::to_vec).collect()
}

fn flatten<T: Clone>(rows: &[Vec<T>], expect_rows: usize, expect_cols: usize, what: &str) -> Result<Vec<T>> {
    if rows.len() != expect_rows || rows.iter().any(|r| r.len() != expect_cols) {
        return Err(Error::Compat(format!(
            "{what}: expected {expect_rows}x{expect_cols} array"
        )));
    }
    Ok(rows.concat())
}

impl Checkpoint {
    pub fn from_kan(model: &KanModel, provenance: Provenance) -> Self {
        let grid = model.layers()[0].grid().spec();
        let layers = model
            .layers()
            .iter()
            .map(|l| {
                let nb = l.grid().basis_count();
                let inp = l.in_dim();
                KanLayerParams {
                    coeffs: nest(&l.coeffs, inp * nb)
                        .iter()
                        .map(|row| nest(row, nb))
                        .collect(),
                    w_b: nest(&l.w_b, inp),
                    w_s: nest(&l.w_s, inp),
                    mask: nest(&l.mask, inp),
                }
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            widths: model.widths(),
            model: ModelParams::Kan { grid, layers },
            provenance,
        }
    }

    pub fn from_mlp(model: &MlpModel, provenance: Provenance) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|d| DenseParams {
                weight: nest(d.weight.as_slice(), d.weight.cols()),
                bias: d.bias.clone(),
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            widths: model.widths(),
            model: ModelParams::Mlp { layers },
            provenance,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.model {
            ModelParams::Kan { .. } => "kan",
            ModelParams::Mlp { .. } => "mlp",
        }
    }

    fn check_layers(&self, count: usize) -> Result<()> {
        if self.widths.len() < 2 || self.widths.len() != count + 1 {
            return Err(Error::Compat(format!(
                "widths {:?} do not match {count} stored layers",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn to_kan(&self) -> Result<KanModel> {
        let ModelParams::Kan { grid, layers } = &self.model else {
            return Err(Error::Compat(format!(
                "expected a kan checkpoint, found {}",
                self.kind()
            )));
        };
        self.check_layers(layers.len())?;
        let grid = build_grid(grid.degree, grid.intervals, grid.t_min, grid.t_max)
            .map_err(|e| Error::Compat(format!("grid: {e}")))?;
        let nb = grid.basis_count();
        let built = layers
            .iter()
            .zip(self.widths.windows(2))
            .enumerate()
            .map(|(l, (p, w))| {
                let (inp, out) = (w[0], w[1]);
                let what = |s: &str| format!("layer {l} {s}");
                let coeffs = flatten(&p.coeffs, out, inp, &what("coeffs"))?;
                let coeffs = flatten(&coeffs, out * inp, nb, &what("coeffs"))?;
                KanLayer::from_parts(
                    inp,
                    out,
                    grid.clone(),
                    coeffs,
                    flatten(&p.w_b, out, inp, &what("w_b"))?,
                    flatten(&p.w_s, out, inp, &what("w_s"))?,
                    flatten(&p.mask, out, inp, &what("mask"))?,
                )
                .map_err(|e| Error::Compat(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        KanModel::new(built).map_err(|e| Error::Compat(e.to_string()))
    }

    pub fn to_mlp(&self) -> Result<MlpModel> {
        let ModelParams::Mlp { layers } = &self.model else {
            return Err(Error::Compat(format!(
                "expected an mlp checkpoint, found {}",
                self.kind()
            )));
        };
        self.check_layers(layers.len())?;
        let built = layers
            .iter()
            .zip(self.widths.windows(2))
            .enumerate()
            .map(|(l, (p, w))| {
                let data = flatten(&p.weight, w[1], w[0], &format!("layer {l} weight"))?;
                if p.bias.len() != w[1] {
                    return Err(Error::Compat(format!("layer {l} bias length {}", p.bias.len())));
                }
                Ok(Dense {
                    weight: Mat::from_vec(w[1], w[0], data)?,
                    bias: p.bias.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpModel::new(built).map_err(|e| Error::Compat(e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_slice(bytes)
            .map_err(|e| Error::Compat(format!("unreadable checkpoint: {e}")))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Compat(format!(
                "checkpoint format_version {} (supported: {CHECKPOINT_FORMAT_VERSION})",
                header.format_version
            )));
        }
        serde_json::from_slice(bytes).map_err(|e| Error::Compat(format!("malformed checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn provenance(stage: Stage) -> Provenance {
        Provenance {
            config_hash: "ab".repeat(32),
            seeds: SeedBundle::from_master(3),
            stage,
            attack: None,
            signal: None,
        }
    }

    fn kan() -> KanModel {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = KanModel::init(&[3, 4, 2], GridSpec::default(), &mut rng).unwrap();
        m.prune(
            0.3,
            &Mat::from_vec(2, 3, vec![0.1, -0.5, 0.9, 0.3, 0.2, -0.7]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn kan_round_trip_is_byte_identical() {
        let model = kan();
        assert!(model.masked_count() > 0);
        let ck = Checkpoint::from_kan(&model, provenance(Stage::Clean));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_kan().unwrap(), model);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["model"]["kind"], "kan");
        assert_eq!(
            v["model"]["layers"][0]["coeffs"][3][2].as_array().unwrap().len(),
            8
        );
        assert_eq!(
            v["model"]["layers"][0]["coeffs"][1][0][5].as_f64().unwrap(),
            model.layers()[0].coeffs[3 * 8 + 5]
        );
    }

    #[test]
    fn mlp_round_trip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = MlpModel::init(&[5, 7, 3], &mut rng).unwrap();
        let mut p = provenance(Stage::Detector);
        p.attack = Some(AttackSpec::preset(crate::attacks::AttackKind::Finetune, 4));
        let ck = Checkpoint::from_mlp(&model, p);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_mlp().unwrap(), model);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(matches!(back.to_kan(), Err(Error::Compat(_))));
    }

    #[test]
    fn rejects_incompatible_files() {
        let ck = Checkpoint::from_kan(&kan(), provenance(Stage::Clean));
        let mut v: serde_json::Value = serde_json::from_slice(&ck.to_bytes().unwrap()).unwrap();
        v["format_version"] = 99.into();
        let err = Checkpoint::from_bytes(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Compat(_)));
        assert_eq!(err.exit_code(), 4);

        let mut bad = ck.clone();
        bad.widths = vec![3, 5, 2];
        assert!(matches!(bad.to_kan(), Err(Error::Compat(_))));
        assert!(Checkpoint::from_bytes(b"not json").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let ck = Checkpoint::from_kan(&kan(), provenance(Stage::Watermarked));
        ck.save(&path).unwrap();
        let first = fs::read(&path).unwrap();
        Checkpoint::load(&path).unwrap().save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }
}
