//! The trainable adapter: a two-layer MLP over frozen embeddings plus the
//! learned point sets it is scored against.
//!
//! The trunk maps a d-dimensional embedding through one hidden ReLU layer to
//! an output space where two families of points live:
//!
//! * reciprocal points `R`, one row per class **including** extra adaptive
//!   rows that belong to no labeled class. A class logit against `R` is the
//!   *negative* inner product, so mass flows toward whichever row the
//!   projected embedding points away from.
//! * center points `C`, one row per labeled class only. Logits against `C`
//!   are plain inner products, normalized before the softmax at loss time.
//!
//! The row-count asymmetry — `R` has exactly `adaptive` more rows than `C` —
//! is structural: adaptive rows exist to absorb open-space mass on the
//! reciprocal side and have no meaning as class centers. Constructors and
//! the file format both enforce it.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::rng::SeededRng;
use crate::vecmath;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter config invalid: {0}")]
    BadConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: bad model file: {reason}")]
    BadModelFile {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("parameter vector has {found} values, model needs {expected}")]
    BadParamVector { expected: usize, found: usize },
}

/// Shape and initialization parameters for one adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Input embedding dimensionality.
    pub input_dim: usize,
    /// Hidden layer width.
    pub hidden_dim: usize,
    /// Output (projection) dimensionality.
    pub output_dim: usize,
    /// Labeled classes backed by real training data (targets + synthetic
    /// unknowns). Both point sets have one row per labeled class.
    pub labeled_classes: usize,
    /// Extra reciprocal-point rows with no labeled class behind them.
    pub adaptive_points: usize,
    /// Weights are drawn `N(0, init_scale^2 / fan_in)`; point rows use the
    /// output dimension as fan-in. Biases start at zero.
    pub init_scale: f64,
    /// Initial distance margin; the trainer keeps it non-negative.
    pub delta_init: f64,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(AdapterError::BadConfig(
                "input_dim, hidden_dim and output_dim must be positive".into(),
            ));
        }
        if self.labeled_classes == 0 {
            return Err(AdapterError::BadConfig(
                "labeled_classes must be positive".into(),
            ));
        }
        if !self.init_scale.is_finite() || self.init_scale <= 0.0 {
            return Err(AdapterError::BadConfig(format!(
                "init_scale must be positive and finite, got {}",
                self.init_scale
            )));
        }
        if !self.delta_init.is_finite() || self.delta_init < 0.0 {
            return Err(AdapterError::BadConfig(format!(
                "delta_init must be non-negative and finite, got {}",
                self.delta_init
            )));
        }
        Ok(())
    }
}

/// A concrete adapter: trunk weights plus both point sets and the margin.
///
/// Matrices are stored row-major as `Vec<Vec<f64>>` — small models, clarity
/// over cache tricks. `reciprocal_points` has `labeled_classes +
/// adaptive_points` rows; `center_points` has `labeled_classes` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel {
    pub config: AdapterConfig,
    /// Hidden layer weights, `hidden_dim` rows of `input_dim`.
    pub w1: Vec<Vec<f64>>,
    /// Hidden layer bias, length `hidden_dim`.
    pub b1: Vec<f64>,
    /// Output layer weights, `output_dim` rows of `hidden_dim`.
    pub w2: Vec<Vec<f64>>,
    /// Output layer bias, length `output_dim`.
    pub b2: Vec<f64>,
    /// Reciprocal points, `labeled_classes + adaptive_points` rows of
    /// `output_dim`.
    pub reciprocal_points: Vec<Vec<f64>>,
    /// Center points, `labeled_classes` rows of `output_dim`.
    pub center_points: Vec<Vec<f64>>,
    /// Distance margin used by the reciprocal-point loss; kept `>= 0`.
    pub margin: f64,
}

/// Everything the forward pass produces for one embedding.
#[derive(Debug, Clone)]
pub struct AdapterOutput {
    /// Projected embedding, length `output_dim`.
    pub projected: Vec<f64>,
    /// Logits against reciprocal points: `-projected . R[k]`, one per row of
    /// `R` (labeled classes first, adaptive rows after).
    pub rp_logits: Vec<f64>,
    /// Logits against center points: `projected . C[k]`, labeled classes
    /// only. Raw (un-normalized) values; normalization happens at loss /
    /// scoring time.
    pub cp_logits: Vec<f64>,
}

/// Build a freshly initialized model. Weight entries are
/// `N(0, init_scale^2 / fan_in)`; biases are zero; `margin = delta_init`.
/// The RNG draw order (w1 rows, w2 rows, R rows, C rows) is fixed so a seed
/// pins the model bit-for-bit.
pub fn init_model(config: &AdapterConfig, seed: u64) -> Result<AdapterModel, AdapterError> {
    config.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut matrix = |rows: usize, cols: usize, fan_in: usize| -> Vec<Vec<f64>> {
        let scale = config.init_scale / (fan_in as f64).sqrt();
        (0..rows)
            .map(|_| (0..cols).map(|_| scale * rng.next_gaussian()).collect())
            .collect()
    };
    let w1 = matrix(config.hidden_dim, config.input_dim, config.input_dim);
    let w2 = matrix(config.output_dim, config.hidden_dim, config.hidden_dim);
    let reciprocal_points = matrix(
        config.labeled_classes + config.adaptive_points,
        config.output_dim,
        config.output_dim,
    );
    let center_points = matrix(config.labeled_classes, config.output_dim, config.output_dim);
    Ok(AdapterModel {
        config: config.clone(),
        b1: vec![0.0; config.hidden_dim],
        b2: vec![0.0; config.output_dim],
        w1,
        w2,
        reciprocal_points,
        center_points,
        margin: config.delta_init,
    })
}

impl AdapterModel {
    /// Total rows in `reciprocal_points`.
    pub fn n_reciprocal(&self) -> usize {
        self.config.labeled_classes + self.config.adaptive_points
    }

    /// Run the trunk and compute both logit families.
    pub fn forward(&self, embedding: &[f64]) -> AdapterOutput {
        assert_eq!(
            embedding.len(),
            self.config.input_dim,
            "embedding dim {} does not match adapter input dim {}",
            embedding.len(),
            self.config.input_dim
        );
        let hidden: Vec<f64> = self
            .w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| (vecmath::dot(row, embedding) + b).max(0.0))
            .collect();
        let projected: Vec<f64> = self
            .w2
            .iter()
            .zip(&self.b2)
            .map(|(row, b)| vecmath::dot(row, &hidden) + b)
            .collect();
        let rp_logits: Vec<f64> = self
            .reciprocal_points
            .iter()
            .map(|r| -vecmath::dot(&projected, r))
            .collect();
        let cp_logits: Vec<f64> = self
            .center_points
            .iter()
            .map(|c| vecmath::dot(&projected, c))
            .collect();
        AdapterOutput {
            projected,
            rp_logits,
            cp_logits,
        }
    }

    /// Number of trainable scalars (weights, biases, both point sets, and
    /// the margin).
    pub fn param_count(&self) -> usize {
        let c = &self.config;
        c.hidden_dim * c.input_dim
            + c.hidden_dim
            + c.output_dim * c.hidden_dim
            + c.output_dim
            + self.n_reciprocal() * c.output_dim
            + c.labeled_classes * c.output_dim
            + 1
    }

    /// Flatten all parameters into one vector in the fixed order
    /// `w1, b1, w2, b2, reciprocal_points, center_points, margin` (matrices
    /// row-major). [`load_flat`](Self::load_flat) inverts this exactly; the
    /// optimizer and the finite-difference oracle both rely on the order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for row in &self.w1 {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.b1);
        for row in &self.w2 {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.b2);
        for row in &self.reciprocal_points {
            out.extend_from_slice(row);
        }
        for row in &self.center_points {
            out.extend_from_slice(row);
        }
        out.push(self.margin);
        out
    }

    /// Overwrite all parameters from a flat vector laid out as
    /// [`flatten`](Self::flatten) produces.
    pub fn load_flat(&mut self, params: &[f64]) -> Result<(), AdapterError> {
        if params.len() != self.param_count() {
            return Err(AdapterError::BadParamVector {
                expected: self.param_count(),
                found: params.len(),
            });
        }
        fn fill_matrix(m: &mut [Vec<f64>], it: &mut impl Iterator<Item = f64>) {
            for row in m.iter_mut() {
                for v in row.iter_mut() {
                    *v = it.next().expect("length checked above");
                }
            }
        }
        let mut it = params.iter().copied();
        fill_matrix(&mut self.w1, &mut it);
        for v in self.b1.iter_mut() {
            *v = it.next().expect("length checked above");
        }
        fill_matrix(&mut self.w2, &mut it);
        for v in self.b2.iter_mut() {
            *v = it.next().expect("length checked above");
        }
        fill_matrix(&mut self.reciprocal_points, &mut it);
        fill_matrix(&mut self.center_points, &mut it);
        self.margin = it.next().expect("length checked above");
        Ok(())
    }

    /// Write the model as versioned text. Layout:
    ///
    /// ```text
    /// spklab-adapter v1
    /// dims <input> <hidden> <output> <labeled> <adaptive>
    /// init <init_scale> <delta_init>
    /// margin <value>
    /// w1 <hidden*input space-separated floats>
    /// b1 <hidden floats>
    /// w2 <output*hidden floats>
    /// b2 <output floats>
    /// reciprocal_points <(labeled+adaptive)*output floats>
    /// center_points <labeled*output floats>
    /// ```
    ///
    /// Floats use shortest round-trip formatting; save/load is bit-exact.
    pub fn save(&self, path: &Path) -> Result<(), AdapterError> {
        let write_row = |line: &mut String, name: &str, values: &[f64]| {
            line.clear();
            line.push_str(name);
            for v in values {
                write!(line, " {v}").expect("write to string");
            }
            line.push('\n');
        };
        let flat_matrix = |m: &[Vec<f64>]| -> Vec<f64> {
            m.iter().flat_map(|r| r.iter().copied()).collect()
        };
        crate::ioutil::write_atomic(path, |w| {
            writeln!(w, "spklab-adapter v1")?;
            writeln!(
                w,
                "dims {} {} {} {} {}",
                self.config.input_dim,
                self.config.hidden_dim,
                self.config.output_dim,
                self.config.labeled_classes,
                self.config.adaptive_points
            )?;
            writeln!(
                w,
                "init {} {}",
                self.config.init_scale, self.config.delta_init
            )?;
            writeln!(w, "margin {}", self.margin)?;
            let mut line = String::new();
            write_row(&mut line, "w1", &flat_matrix(&self.w1));
            w.write_all(line.as_bytes())?;
            write_row(&mut line, "b1", &self.b1);
            w.write_all(line.as_bytes())?;
            write_row(&mut line, "w2", &flat_matrix(&self.w2));
            w.write_all(line.as_bytes())?;
            write_row(&mut line, "b2", &self.b2);
            w.write_all(line.as_bytes())?;
            write_row(
                &mut line,
                "reciprocal_points",
                &flat_matrix(&self.reciprocal_points),
            );
            w.write_all(line.as_bytes())?;
            write_row(&mut line, "center_points", &flat_matrix(&self.center_points));
            w.write_all(line.as_bytes())?;
            Ok(())
        })
        .map_err(|source| AdapterError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Load a model written by [`save`](Self::save). Rejects unknown
    /// versions, wrong element counts, and non-finite values — a truncated
    /// or hand-edited file fails loudly instead of scoring garbage.
    pub fn load(path: &Path) -> Result<AdapterModel, AdapterError> {
        let text = std::fs::read_to_string(path).map_err(|source| AdapterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let p = path.display().to_string();
        let bad = |line: usize, reason: String| AdapterError::BadModelFile {
            path: p.clone(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "spklab-adapter v1")) => {}
            Some((idx, other)) => {
                return Err(bad(idx + 1, format!("unsupported header {other:?}")))
            }
            None => return Err(bad(1, "empty file".into())),
        }
        let mut next_line = |expect: &str| -> Result<(usize, Vec<f64>), AdapterError> {
            let (idx, line) = lines
                .next()
                .ok_or_else(|| bad(0, format!("file ended before {expect:?} line")))?;
            let line_no = idx + 1;
            let mut parts = line.split_ascii_whitespace();
            let tag = parts
                .next()
                .ok_or_else(|| bad(line_no, "empty line".into()))?;
            if tag != expect {
                return Err(bad(line_no, format!("expected {expect:?}, found {tag:?}")));
            }
            let mut values = Vec::new();
            for piece in parts {
                let v: f64 = piece
                    .parse()
                    .map_err(|e| bad(line_no, format!("bad float {piece:?}: {e}")))?;
                if !v.is_finite() {
                    return Err(bad(line_no, format!("non-finite value {v}")));
                }
                values.push(v);
            }
            Ok((line_no, values))
        };

        let (dims_line, dims) = next_line("dims")?;
        if dims.len() != 5 || dims.iter().any(|d| d.fract() != 0.0 || *d < 0.0) {
            return Err(bad(dims_line, "dims needs 5 non-negative integers".into()));
        }
        let (input_dim, hidden_dim, output_dim, labeled, adaptive) = (
            dims[0] as usize,
            dims[1] as usize,
            dims[2] as usize,
            dims[3] as usize,
            dims[4] as usize,
        );
        let (init_line, init) = next_line("init")?;
        if init.len() != 2 {
            return Err(bad(init_line, "init needs 2 floats".into()));
        }
        let config = AdapterConfig {
            input_dim,
            hidden_dim,
            output_dim,
            labeled_classes: labeled,
            adaptive_points: adaptive,
            init_scale: init[0],
            delta_init: init[1],
        };
        config.validate().map_err(|e| bad(dims_line, e.to_string()))?;

        let (margin_line, margin) = next_line("margin")?;
        if margin.len() != 1 {
            return Err(bad(margin_line, "margin needs exactly 1 float".into()));
        }

        let mut read_matrix = |name: &str,
                               rows: usize,
                               cols: usize|
         -> Result<Vec<Vec<f64>>, AdapterError> {
            let (line_no, flat) = next_line(name)?;
            if flat.len() != rows * cols {
                return Err(bad(
                    line_no,
                    format!("{name} needs {} values, found {}", rows * cols, flat.len()),
                ));
            }
            Ok(flat.chunks(cols).map(|c| c.to_vec()).collect())
        };
        let w1 = read_matrix("w1", hidden_dim, input_dim)?;
        let b1 = read_matrix("b1", 1, hidden_dim)?.remove(0);
        let w2 = read_matrix("w2", output_dim, hidden_dim)?;
        let b2 = read_matrix("b2", 1, output_dim)?.remove(0);
        let reciprocal_points = read_matrix("reciprocal_points", labeled + adaptive, output_dim)?;
        let center_points = read_matrix("center_points", labeled, output_dim)?;

        Ok(AdapterModel {
            config,
            w1,
            b1,
            w2,
            b2,
            reciprocal_points,
            center_points,
            margin: margin[0],
        })
    }
}
