//! Behavioral-systems toolkit: trajectories, block-Hankel matrices, the
//! past/future data split used by DeePC, persistency-of-excitation checks and
//! a reference state-space simulator.
//!
//! Signals are stored time-major by column: column `t` holds
//! `w(t) = col(u(t), y(t))`, with the first `m` rows being inputs.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// A finite signal `w = col(u, y)` with `m` inputs and `p` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    values: DMatrix<f64>,
    inputs: usize,
}

impl Trajectory {
    /// `values` is `q x T`; the first `inputs` rows are the input channels.
    pub fn new(values: DMatrix<f64>, inputs: usize) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::dim("trajectory needs q >= 1 and T >= 1"));
        }
        if inputs > values.nrows() {
            return Err(Error::dim(format!(
                "input dimension {inputs} exceeds signal dimension {}",
                values.nrows()
            )));
        }
        Ok(Self { values, inputs })
    }

    /// Builds a trajectory from an `m x T` input and a `p x T` output block.
    pub fn from_parts(u: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        if u.ncols() != y.ncols() {
            return Err(Error::dim(format!(
                "input length {} differs from output length {}",
                u.ncols(),
                y.ncols()
            )));
        }
        let values = linalg::vstack(&[u, y]);
        Self::new(values, u.nrows())
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn signal_dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs
    }

    pub fn output_dim(&self) -> usize {
        self.values.nrows() - self.inputs
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn inputs(&self) -> DMatrix<f64> {
        self.values.rows(0, self.inputs).into_owned()
    }

    pub fn outputs(&self) -> DMatrix<f64> {
        self.values.rows(self.inputs, self.output_dim()).into_owned()
    }

    /// `w(t)` using 1-based time indexing.
    pub fn at(&self, t: usize) -> DVector<f64> {
        assert!(t >= 1 && t <= self.len(), "time index {t} out of range");
        self.values.column(t - 1).into_owned()
    }

    /// Writes `t,u1..um,y1..yp` with one row per time step.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.input_dim()).map(|i| format!("u{i}")));
        header.extend((1..=self.output_dim()).map(|i| format!("y{i}")));
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut row = vec![(t + 1).to_string()];
            row.extend(self.values.column(t).iter().map(|v| format_float(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format written by [`Trajectory::write_csv`]. Column roles are
    /// taken from the `u*` / `y*` header names.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = r.headers()?.clone();
        if header.get(0) != Some("t") {
            return Err(Error::Parse { line: 1, msg: "first column must be `t`".into() });
        }
        let mut m = 0;
        let mut p = 0;
        for name in header.iter().skip(1) {
            if name.starts_with('u') && p == 0 {
                m += 1;
            } else if name.starts_with('y') {
                p += 1;
            } else {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("unexpected column `{name}` (inputs must precede outputs)"),
                });
            }
        }
        let q = m + p;
        let mut cols: Vec<f64> = Vec::new();
        let mut expected_t = 1usize;
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            if rec.len() != q + 1 {
                return Err(Error::Parse { line, msg: format!("expected {} fields", q + 1) });
            }
            let t: usize = rec[0]
                .parse()
                .map_err(|_| Error::Parse { line, msg: "bad time index".into() })?;
            if t != expected_t {
                return Err(Error::Parse { line, msg: format!("time index {t} is not contiguous") });
            }
            expected_t += 1;
            for f in rec.iter().skip(1) {
                cols.push(
                    f.parse()
                        .map_err(|_| Error::Parse { line, msg: format!("bad number `{f}`") })?,
                );
            }
        }
        let len = expected_t - 1;
        Self::new(DMatrix::from_column_slice(q, len, &cols), m)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Block-Hankel matrix of depth `L`: block `(i, j)` is `w(i + j - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelMatrix {
    data: DMatrix<f64>,
    depth: usize,
    signal_dim: usize,
}

impl HankelMatrix {
    /// Builds `H_L` from a `q x T` signal matrix.
    pub fn from_signal(signal: &DMatrix<f64>, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::arg("Hankel depth must be positive"));
        }
        let (q, len) = signal.shape();
        if depth > len {
            return Err(Error::dim(format!("Hankel depth {depth} exceeds signal length {len}")));
        }
        let cols = len - depth + 1;
        let mut data = DMatrix::zeros(q * depth, cols);
        for i in 0..depth {
            for j in 0..cols {
                data.view_mut((i * q, j), (q, 1)).copy_from(&signal.column(i + j));
            }
        }
        Ok(Self { data, depth, signal_dim: q })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn signal_dim(&self) -> usize {
        self.signal_dim
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        linalg::numeric_rank(&self.data)
    }
}

pub fn build_hankel(w: &Trajectory, depth: usize) -> Result<HankelMatrix> {
    HankelMatrix::from_signal(w.values(), depth)
}

/// Past and future data blocks sliced from depth `T_ini + T_f` Hankel matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelBlocks {
    pub u_past: DMatrix<f64>,
    pub y_past: DMatrix<f64>,
    pub u_future: DMatrix<f64>,
    pub y_future: DMatrix<f64>,
    pub t_ini: usize,
    pub t_f: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl HankelBlocks {
    /// Number of data columns `N = T - (T_ini + T_f) + 1`.
    pub fn columns(&self) -> usize {
        self.u_past.ncols()
    }

    /// `col(U_p, Y_p, U_f)`, the matrix defining the regularizer projection.
    pub fn stacked_known(&self) -> DMatrix<f64> {
        linalg::vstack(&[&self.u_past, &self.y_past, &self.u_future])
    }
}

/// Splits `H_{T_ini+T_f}(u_d)` and `H_{T_ini+T_f}(y_d)` into past and future
/// block rows. `u_d` is `m x T`, `y_d` is `p x T`.
pub fn split_past_future(
    u_d: &DMatrix<f64>,
    y_d: &DMatrix<f64>,
    t_ini: usize,
    t_f: usize,
) -> Result<HankelBlocks> {
    if t_ini == 0 || t_f == 0 {
        return Err(Error::arg("T_ini and T_f must be positive"));
    }
    if u_d.ncols() != y_d.ncols() {
        return Err(Error::dim("input and output data lengths differ"));
    }
    let len = u_d.ncols();
    if t_ini + t_f > len {
        return Err(Error::dim(format!(
            "T_ini + T_f = {} exceeds data length {len}",
            t_ini + t_f
        )));
    }
    let depth = t_ini + t_f;
    let (m, p) = (u_d.nrows(), y_d.nrows());
    let hu = HankelMatrix::from_signal(u_d, depth)?.into_matrix();
    let hy = HankelMatrix::from_signal(y_d, depth)?.into_matrix();
    Ok(HankelBlocks {
        u_past: hu.rows(0, m * t_ini).into_owned(),
        u_future: hu.rows(m * t_ini, m * t_f).into_owned(),
        y_past: hy.rows(0, p * t_ini).into_owned(),
        y_future: hy.rows(p * t_ini, p * t_f).into_owned(),
        t_ini,
        t_f,
        inputs: m,
        outputs: p,
    })
}

/// Outcome of a generalized persistency-of-excitation check.
#[derive(Debug, Clone, PartialEq)]
pub struct PeReport {
    pub rank: usize,
    pub expected_rank: usize,
    pub satisfied: bool,
    pub singular_values: Vec<f64>,
}

/// Checks `rank H_L(w_d) = m L + n` for caller-supplied `m` and order `n`.
pub fn check_generalized_pe(h: &HankelMatrix, inputs: usize, order: usize) -> PeReport {
    let sv = linalg::singular_values(h.matrix());
    let rank = match sv.first() {
        Some(&smax) if smax > 0.0 => {
            let tol = linalg::rank_threshold(h.matrix().nrows(), h.matrix().ncols(), smax);
            sv.iter().filter(|&&s| s > tol).count()
        }
        _ => 0,
    };
    let expected_rank = inputs * h.depth() + order;
    PeReport { rank, expected_rank, satisfied: rank == expected_rank, singular_values: sv }
}

/// Discrete-time state-space model `x+ = Ax + Bu`, `y = Cx + Du`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dim("A must be square"));
        }
        if b.nrows() != n || c.ncols() != n {
            return Err(Error::dim("B rows and C columns must equal the order"));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::dim("D must be p x m"));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    /// `O_l = col(C, CA, ..., CA^{l-1})`.
    pub fn observability(&self, lag: usize) -> DMatrix<f64> {
        let (p, n) = (self.outputs(), self.order());
        let mut out = DMatrix::zeros(p * lag, n);
        let mut block = self.c.clone();
        for i in 0..lag {
            out.view_mut((i * p, 0), (p, n)).copy_from(&block);
            block = &block * &self.a;
        }
        out
    }

    /// Smallest `l` with `rank O_l = n` (at most `n`; zero for static systems).
    pub fn lag(&self) -> Option<usize> {
        let n = self.order();
        if n == 0 {
            return Some(0);
        }
        (1..=n).find(|&l| linalg::numeric_rank(&self.observability(l)) == n)
    }

    pub fn simulate(&self, x0: &DVector<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        simulate_lti(self, x0, u)
    }
}

/// Simulates the model from `x0` under the `m x T` input `u`, returning the
/// `p x T` output.
pub fn simulate_lti(model: &StateSpaceModel, x0: &DVector<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x0.len() != model.order() {
        return Err(Error::dim(format!(
            "initial state has length {}, model order is {}",
            x0.len(),
            model.order()
        )));
    }
    if u.nrows() != model.inputs() {
        return Err(Error::dim(format!(
            "input has {} channels, model expects {}",
            u.nrows(),
            model.inputs()
        )));
    }
    let mut x = x0.clone();
    let mut y = DMatrix::zeros(model.outputs(), u.ncols());
    for t in 0..u.ncols() {
        let ut = u.column(t);
        y.set_column(t, &(&model.c * &x + &model.d * ut));
        x = &model.a * &x + &model.b * ut;
    }
    Ok(y)
}
