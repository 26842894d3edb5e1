use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::alphabet::LabelAlphabet;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"CSNN";
const CHECKPOINT_VERSION: u32 = 1;

/// Layer sizes: `cells[l]` memory cells per direction in hidden layer `l`.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Topology {
    pub input_dim: usize,
    pub cells: Vec<usize>,
}

impl Topology {
    /// Five BLSTM layers of 120 cells per direction on 50-dimensional input.
    pub fn paper() -> Self {
        Topology { input_dim: 50, cells: vec![120; 5] }
    }

    /// Single BLSTM layer used for desk-scale runs.
    pub fn small(input_dim: usize) -> Self {
        Topology { input_dim, cells: vec![48] }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.cells.is_empty() || self.cells.contains(&0) {
            return Err(Error::config(format!("invalid topology {self:?}")));
        }
        Ok(())
    }
}

/// Offsets of one direction's parameter block.
///
/// Gate rows are ordered input, forget, cell, output. `w` is `4H × in`,
/// `u` is stored transposed as `H × 4H`, peepholes are `H` each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirLayout {
    pub input: usize,
    pub cells: usize,
    pub w: usize,
    pub u: usize,
    pub b: usize,
    pub peep_i: usize,
    pub peep_f: usize,
    pub peep_o: usize,
}

impl DirLayout {
    fn new(input: usize, cells: usize, start: usize) -> (Self, usize) {
        let g = 4 * cells;
        let w = start;
        let u = w + g * input;
        let b = u + cells * g;
        let peep_i = b + g;
        let peep_f = peep_i + cells;
        let peep_o = peep_f + cells;
        (DirLayout { input, cells, w, u, b, peep_i, peep_f, peep_o }, peep_o + cells)
    }

    pub fn len(&self) -> usize {
        let g = 4 * self.cells;
        g * self.input + self.cells * g + g + 3 * self.cells
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    /// `[forward, backward]` per hidden layer.
    pub layers: Vec<[DirLayout; 2]>,
    pub out_w: usize,
    pub out_b: usize,
    pub classes: usize,
    pub top_dim: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(topology: &Topology, classes: usize) -> Self {
        let mut offset = 0;
        let mut input = topology.input_dim;
        let mut layers = Vec::with_capacity(topology.cells.len());
        for &cells in &topology.cells {
            let (fwd, next) = DirLayout::new(input, cells, offset);
            let (bwd, next) = DirLayout::new(input, cells, next);
            layers.push([fwd, bwd]);
            offset = next;
            input = 2 * cells;
        }
        let out_w = offset;
        let out_b = out_w + classes * input;
        Layout { layers, out_w, out_b, classes, top_dim: input, total: out_b + classes }
    }
}

/// Network parameters in one flat buffer addressed through [`Layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct DblstmModel {
    topology: Topology,
    alphabet: LabelAlphabet,
    layout: Layout,
    params: Vec<f64>,
}

impl DblstmModel {
    /// Uniform weights in `[−scale, scale]`, zero biases except forget gates at 1.
    pub fn init(topology: Topology, alphabet: LabelAlphabet, seed: u64) -> Result<Self> {
        Self::init_with_scale(topology, alphabet, seed, 0.1)
    }

    pub fn init_with_scale(topology: Topology, alphabet: LabelAlphabet, seed: u64, scale: f64) -> Result<Self> {
        topology.validate()?;
        let layout = Layout::new(&topology, alphabet.num_classes());
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |slice: &mut [f64]| {
            for v in slice {
                *v = if scale == 0.0 { 0.0 } else { rng.random_range(-scale..=scale) };
            }
        };
        for dirs in &layout.layers {
            for d in dirs {
                fill(&mut params[d.w..d.b]);
                fill(&mut params[d.peep_i..d.peep_o + d.cells]);
                let fb = d.b + d.cells;
                params[fb..fb + d.cells].fill(1.0);
            }
        }
        fill(&mut params[layout.out_w..layout.out_b]);
        Ok(DblstmModel { topology, alphabet, layout, params })
    }

    pub fn from_params(topology: Topology, alphabet: LabelAlphabet, params: Vec<f64>) -> Result<Self> {
        topology.validate()?;
        let layout = Layout::new(&topology, alphabet.num_classes());
        if params.len() != layout.total {
            return Err(Error::contract(format!(
                "expected {} parameters for {topology:?}, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(DblstmModel { topology, alphabet, layout, params })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn alphabet(&self) -> &LabelAlphabet {
        &self.alphabet
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.topology.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layout.classes
    }

    /// `CSNN` container: version, topology, alphabet, then parameters as
    /// little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.u32(self.topology.input_dim as u32);
        w.u32(self.topology.cells.len() as u32);
        for &c in &self.topology.cells {
            w.u32(c as u32);
        }
        w.u32(self.alphabet.blank_index() as u32);
        let symbols: String = self.alphabet.symbols().iter().collect();
        w.u32(self.alphabet.symbols().len() as u32);
        w.str(&symbols);
        w.f64s(&self.params);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, CHECKPOINT_MAGIC)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let input_dim = r.u32()? as usize;
        let layers = r.u32()? as usize;
        let cells = (0..layers).map(|_| r.u32().map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
        if r.u32()? as usize != LabelAlphabet::BLANK {
            return Err(Error::format("checkpoint blank index must be 0"));
        }
        let n_symbols = r.u32()? as usize;
        let symbols = r.str()?;
        if symbols.chars().count() != n_symbols {
            return Err(Error::format("alphabet table length mismatch"));
        }
        let params = r.f64s()?;
        r.expect_end()?;
        Self::from_params(Topology { input_dim, cells }, LabelAlphabet::new(symbols.chars())?, params)
    }
}

/// `T × K` per-frame class distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSequence {
    rows: Vec<f64>,
    classes: usize,
}

impl PosteriorSequence {
    /// Validates that every row is a distribution (sums to 1 within 1e-6).
    pub fn new(rows: Vec<f64>, classes: usize) -> Result<Self> {
        if classes == 0 || rows.is_empty() || !rows.len().is_multiple_of(classes) {
            return Err(Error::contract("posterior buffer is not a whole number of rows"));
        }
        for row in rows.chunks_exact(classes) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::contract("posterior row is not a probability distribution"));
            }
        }
        Ok(PosteriorSequence { rows, classes })
    }

    /// Row-wise softmax of a logit matrix.
    pub fn from_logits(logits: &[f64], classes: usize) -> Self {
        let rows = crate::ctc::log_softmax(logits, classes).into_iter().map(f64::exp).collect();
        PosteriorSequence { rows, classes }
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t * self.classes..(t + 1) * self.classes]
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }
}
