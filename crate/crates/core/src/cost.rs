//! Closed-form compute (FLOPs) and storage (bytes) overheads of coreset
//! selection and training data attribution methods.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv;
use crate::util::ceil_fraction;

pub const FLOPS_PER_PFLOP: f64 = 1e15;
pub const BYTES_PER_GB: f64 = 1e9;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("{method} needs parameter {param}")]
    MissingParam { method: Method, param: &'static str },
    #[error("invalid parameter {param}: {reason}")]
    Invalid { param: String, reason: String },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error(transparent)]
    Config(#[from] kv::KvError),
}

/// Workload description. Unset fields are only an error for methods that
/// need them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkloadParams {
    pub n: Option<f64>,
    pub q: Option<f64>,
    pub t: Option<f64>,
    pub f: Option<f64>,
    pub p: Option<f64>,
    pub d: Option<f64>,
    pub c: Option<f64>,
    /// Coreset size; `ceil(0.1 * n)` when unset.
    pub k: Option<f64>,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub r: Option<f64>,
    pub alpha: Option<f64>,
    pub p_prime: Option<f64>,
    pub b: Option<f64>,
    /// Defaults to 4.
    pub bytes_per_param: Option<f64>,
}

const KEYS: [&str; 15] = [
    "n",
    "q",
    "t",
    "f",
    "p",
    "d",
    "c",
    "k",
    "gamma",
    "epsilon",
    "r",
    "alpha",
    "p_prime",
    "b",
    "bytes_per_param",
];

impl WorkloadParams {
    /// ImageNet / ResNet-18 workload used for the worked overhead example.
    pub fn imagenet_resnet18() -> Self {
        Self {
            n: Some(1_281_167.0),
            q: Some(50_000.0),
            t: Some(90.0),
            f: Some(1_818_228_160.0),
            p: Some(11_689_128.0),
            d: Some(150_528.0),
            r: Some(10.0),
            gamma: Some(1.0),
            epsilon: Some(0.01),
            bytes_per_param: Some(4.0),
            ..Self::default()
        }
    }

    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }

    fn slot(&mut self, key: &str) -> Option<&mut Option<f64>> {
        Some(match key {
            "n" | "N" => &mut self.n,
            "q" | "Q" => &mut self.q,
            "t" | "T" => &mut self.t,
            "f" => &mut self.f,
            "p" => &mut self.p,
            "d" => &mut self.d,
            "c" => &mut self.c,
            "k" => &mut self.k,
            "gamma" => &mut self.gamma,
            "epsilon" => &mut self.epsilon,
            "r" | "R" => &mut self.r,
            "alpha" => &mut self.alpha,
            "p_prime" => &mut self.p_prime,
            "b" => &mut self.b,
            "bytes_per_param" => &mut self.bytes_per_param,
            _ => return None,
        })
    }

    /// Sets a parameter by name. Numbers may use `_` separators.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CostError> {
        let parsed: f64 = value.replace('_', "").parse().map_err(|_| CostError::Invalid {
            param: key.to_string(),
            reason: format!("not a number: {value}"),
        })?;
        let slot = self
            .slot(key)
            .ok_or_else(|| CostError::UnknownParam(key.to_string()))?;
        *slot = Some(parsed);
        Ok(())
    }

    /// Applies every entry of a `key = value` file on top of `self`.
    pub fn apply_config(&mut self, text: &str) -> Result<(), CostError> {
        for e in kv::parse(text)? {
            self.set(&e.key, &e.value).map_err(|err| match err {
                CostError::Invalid { param, reason } => CostError::Invalid {
                    param,
                    reason: format!("{reason} (line {})", e.line),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |param: &str, reason: &str| CostError::Invalid {
            param: param.to_string(),
            reason: reason.to_string(),
        };
        let fields = [
            ("n", self.n),
            ("q", self.q),
            ("t", self.t),
            ("f", self.f),
            ("p", self.p),
            ("d", self.d),
            ("c", self.c),
            ("k", self.k),
            ("gamma", self.gamma),
            ("r", self.r),
            ("p_prime", self.p_prime),
            ("b", self.b),
            ("bytes_per_param", self.bytes_per_param),
        ];
        for (name, v) in fields {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(bad(name, "must be finite and positive"));
                }
            }
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e < 1.0) {
                return Err(bad("epsilon", "must be in (0, 1)"));
            }
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(bad("alpha", "must be in (0, 1]"));
            }
        }
        Ok(())
    }

    fn bytes(&self) -> f64 {
        self.bytes_per_param.unwrap_or(4.0)
    }

    fn k_or_default(&self) -> Option<f64> {
        self.k.or_else(|| self.n.map(|n| ceil_fraction(0.1, n)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Glister,
    Forgetting,
    GraphCut,
    Cal,
    GraNd,
    Herding,
    Slocurv,
    Ltc,
    Infl,
    Datamodels,
    Trak,
    Arnoldi,
    TracIn,
}

impl Method {
    pub const CORESET: [Method; 8] = [
        Method::Glister,
        Method::Forgetting,
        Method::GraphCut,
        Method::Cal,
        Method::GraNd,
        Method::Herding,
        Method::Slocurv,
        Method::Ltc,
    ];
    pub const TDA: [Method; 6] = [
        Method::Infl,
        Method::Datamodels,
        Method::Trak,
        Method::Arnoldi,
        Method::TracIn,
        Method::Ltc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Glister => "Glister",
            Method::Forgetting => "Forgetting",
            Method::GraphCut => "GraphCut",
            Method::Cal => "Cal",
            Method::GraNd => "GraNd",
            Method::Herding => "Herding",
            Method::Slocurv => "Slocurv",
            Method::Ltc => "LTC",
            Method::Infl => "Infl",
            Method::Datamodels => "Datamodels",
            Method::Trak => "TRAK",
            Method::Arnoldi => "Arnoldi",
            Method::TracIn => "TracIn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub method: String,
    pub compute_flops: f64,
    pub storage_bytes: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverheadTable {
    pub rows: Vec<OverheadRow>,
}

impl OverheadTable {
    pub fn get(&self, method: Method) -> Option<&OverheadRow> {
        self.rows.iter().find(|r| r.method == method.name())
    }
}

struct Need<'a> {
    params: &'a WorkloadParams,
    method: Method,
}

impl Need<'_> {
    fn get(&self, value: Option<f64>, param: &'static str) -> Result<f64, CostError> {
        value.ok_or(CostError::MissingParam {
            method: self.method,
            param,
        })
    }
    fn n(&self) -> Result<f64, CostError> {
        self.get(self.params.n, "n")
    }
    fn q(&self) -> Result<f64, CostError> {
        self.get(self.params.q, "q")
    }
    fn t(&self) -> Result<f64, CostError> {
        self.get(self.params.t, "t")
    }
    fn f(&self) -> Result<f64, CostError> {
        self.get(self.params.f, "f")
    }
    fn p(&self) -> Result<f64, CostError> {
        self.get(self.params.p, "p")
    }
    fn d(&self) -> Result<f64, CostError> {
        self.get(self.params.d, "d")
    }
    fn r(&self) -> Result<f64, CostError> {
        self.get(self.params.r, "r")
    }
    fn p_prime(&self) -> Result<f64, CostError> {
        self.get(self.params.p_prime, "p_prime")
    }
}

/// `(compute_flops, storage_bytes)` for one method.
pub fn overhead(method: Method, params: &WorkloadParams) -> Result<(f64, f64), CostError> {
    params.validate()?;
    let x = Need { params, method };
    let b = params.bytes();
    Ok(match method {
        Method::Glister => {
            let gamma = x.get(params.gamma, "gamma")?;
            let eps = x.get(params.epsilon, "epsilon")?;
            (
                x.n()? * x.q()? * x.t()? * x.f()? / gamma * (1.0 / eps).log10(),
                x.q()? * b,
            )
        }
        Method::Forgetting => (0.0, x.n()? * x.t()? * b),
        Method::GraphCut => {
            let n = x.n()?;
            let k = x.get(params.k_or_default(), "k")?;
            (n * n * k, n * n * b)
        }
        Method::Cal => (x.n()? * x.q()? * x.d()?, x.n()? * x.d()? * b),
        // written as Slocurv times T so the ratio is exact
        Method::GraNd => (
            3.0 * x.n()? * x.r()? * x.f()? * x.t()?,
            x.n()? * x.t()? * x.r()? * x.p()? * b,
        ),
        Method::Herding => (x.n()? * x.t()? * x.d()?, x.n()? * x.d()? * b),
        Method::Slocurv => (3.0 * x.n()? * x.r()? * x.f()?, x.n()? * x.r()? * x.d()? * b),
        Method::Ltc => (x.q()? * x.t()? * x.f()?, x.n()? * x.t()? * b),
        Method::Infl => {
            let subset = ceil_fraction(x.get(params.alpha, "alpha")?, x.n()?);
            (
                3.0 * subset * x.q()? * x.r()? * x.t()? * x.f()?,
                x.r()? * x.p()? * b,
            )
        }
        Method::Datamodels => {
            let subset = ceil_fraction(x.get(params.alpha, "alpha")?, x.n()?);
            (3.0 * subset * x.r()? * x.t()? * x.f()?, x.r()? * x.n()? * b)
        }
        Method::Trak => (
            2.0 * x.n()? * x.r()? * x.p()? * x.p_prime()?,
            x.n()? * x.p_prime()? * b,
        ),
        Method::Arnoldi => (
            2.0 * x.n()? * x.q()? * x.p()? * x.p_prime()?,
            x.n()? * x.q()? * x.p()? * b,
        ),
        Method::TracIn => (3.0 * x.n()? * x.t()? * x.f()?, x.n()? * x.t()? * x.p()? * b),
    })
}

pub fn overheads(methods: &[Method], params: &WorkloadParams) -> Result<OverheadTable, CostError> {
    let rows = methods
        .iter()
        .map(|&m| {
            let (compute_flops, storage_bytes) = overhead(m, params)?;
            Ok(OverheadRow {
                method: m.name().to_string(),
                compute_flops,
                storage_bytes,
            })
        })
        .collect::<Result<_, CostError>>()?;
    Ok(OverheadTable { rows })
}

pub fn coreset_overheads(params: &WorkloadParams) -> Result<OverheadTable, CostError> {
    overheads(&Method::CORESET, params)
}

pub fn tda_overheads(params: &WorkloadParams) -> Result<OverheadTable, CostError> {
    overheads(&Method::TDA, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Units {
    Raw,
    /// PFLOPs and GB.
    #[default]
    Engineering,
}

/// Three significant digits; fixed notation for magnitudes in [0.01, 1000).
pub fn sig3(v: f64) -> String {
    let sci = format!("{v:.2e}");
    let exp: i32 = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse().ok())
        .unwrap_or(0);
    if (-2..3).contains(&exp) {
        format!("{:.*}", (2 - exp) as usize, v)
    } else {
        sci
    }
}

fn cells(row: &OverheadRow, units: Units) -> (String, String) {
    match units {
        Units::Raw => (
            format!("{} FLOPs", row.compute_flops),
            format!("{} B", row.storage_bytes),
        ),
        Units::Engineering => (
            format!("{} PFLOPs", sig3(row.compute_flops / FLOPS_PER_PFLOP)),
            format!("{} GB", sig3(row.storage_bytes / BYTES_PER_GB)),
        ),
    }
}

/// Aligned plain-text table.
pub fn render_report(table: &OverheadTable, units: Units) -> String {
    let mut grid = vec![("method".to_string(), "compute".to_string(), "storage".to_string())];
    for row in &table.rows {
        let (c, s) = cells(row, units);
        grid.push((row.method.clone(), c, s));
    }
    let w0 = grid.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let w1 = grid.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let w2 = grid.iter().map(|r| r.2.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (i, (m, c, s)) in grid.iter().enumerate() {
        if i == 0 {
            writeln!(out, "{m:<w0$}  {c:<w1$}  {s:<w2$}").unwrap();
        } else {
            writeln!(out, "{m:<w0$}  {c:>w1$}  {s:>w2$}").unwrap();
        }
    }
    out.lines().map(str::trim_end).collect::<Vec<_>>().join("\n") + "\n"
}

pub fn render_csv(table: &OverheadTable) -> String {
    let mut out = String::from("method,compute_flops,storage_bytes,compute_pflops,storage_gb\n");
    for r in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.method,
            r.compute_flops,
            r.storage_bytes,
            r.compute_flops / FLOPS_PER_PFLOP,
            r.storage_bytes / BYTES_PER_GB
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> WorkloadParams {
        let mut p = WorkloadParams::default();
        for key in KEYS {
            p.set(key, "1").unwrap();
        }
        p.epsilon = Some(0.1);
        p
    }

    #[test]
    fn unit_workload() {
        let t = coreset_overheads(&unit()).unwrap();
        assert_eq!(t.get(Method::Ltc).unwrap().compute_flops, 1.0);
        assert_eq!(t.get(Method::Glister).unwrap().compute_flops, 1.0);
        let t = tda_overheads(&unit()).unwrap();
        assert_eq!(t.get(Method::TracIn).unwrap().compute_flops, 3.0);
        assert_eq!(t.get(Method::Ltc).unwrap().compute_flops, 1.0);
    }

    #[test]
    fn datamodels_equals_tracin_at_full_ratio() {
        let mut p = WorkloadParams::imagenet_resnet18();
        p.alpha = Some(1.0);
        p.r = Some(1.0);
        let t = tda_overheads(&{
            let mut q = p.clone();
            q.p_prime = Some(2048.0);
            q
        })
        .unwrap();
        assert_eq!(
            t.get(Method::Datamodels).unwrap().compute_flops,
            t.get(Method::TracIn).unwrap().compute_flops
        );
    }

    #[test]
    fn missing_param_names_method() {
        let mut p = unit();
        p.f = None;
        assert_eq!(
            coreset_overheads(&p).unwrap_err(),
            CostError::MissingParam {
                method: Method::Glister,
                param: "f"
            }
        );
        assert!(overhead(Method::Cal, &p).is_ok());
    }

    #[test]
    fn default_k_and_bytes() {
        let mut p = unit();
        p.k = None;
        p.n = Some(1_281_167.0);
        let (compute, _) = overhead(Method::GraphCut, &p).unwrap();
        assert_eq!(compute, 1_281_167.0f64.powi(2) * 128_117.0);
        p.bytes_per_param = None;
        assert_eq!(overhead(Method::Forgetting, &p).unwrap().1, 1_281_167.0 * 4.0);
    }

    #[test]
    fn invalid_values() {
        let mut p = unit();
        p.epsilon = Some(1.0);
        assert!(matches!(p.validate().unwrap_err(), CostError::Invalid { .. }));
        let mut p = unit();
        p.alpha = Some(0.0);
        assert!(p.validate().is_err());
        let mut p = unit();
        p.n = Some(-3.0);
        assert!(p.validate().is_err());
        assert!(matches!(
            unit().set("zeta", "1").unwrap_err(),
            CostError::UnknownParam(_)
        ));
        assert!(unit().set("n", "many").is_err());
    }

    #[test]
    fn config_file() {
        let mut p = WorkloadParams::default();
        p.apply_config("N = 1_000 # train\nq=20\nT=3\nf=5\n").unwrap();
        assert_eq!(p.n, Some(1000.0));
        assert_eq!(overhead(Method::Ltc, &p).unwrap(), (300.0, 12_000.0));
        let err = p.apply_config("q = x\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn sig3_formatting() {
        assert_eq!(sig3(1.0), "1.00");
        assert_eq!(sig3(8.182), "8.18");
        assert_eq!(sig3(210.29), "210");
        assert_eq!(sig3(0.017357), "0.0174");
        assert_eq!(sig3(999.7), "1.00e3");
        assert_eq!(sig3(2.0965e7), "2.10e7");
        assert_eq!(sig3(2e-4), "2.00e-4");
        assert_eq!(sig3(0.0), "0.00");
    }

    #[test]
    fn reports() {
        let empty = OverheadTable::default();
        assert_eq!(
            render_report(&empty, Units::Engineering),
            "method  compute  storage\n"
        );
        assert_eq!(
            render_csv(&empty),
            "method,compute_flops,storage_bytes,compute_pflops,storage_gb\n"
        );
        let one = OverheadTable {
            rows: vec![OverheadRow {
                method: "X".into(),
                compute_flops: 1e15,
                storage_bytes: 1e9,
            }],
        };
        let text = render_report(&one, Units::Engineering);
        assert!(text.contains("1.00 PFLOPs"));
        assert!(text.contains("1.00 GB"));
        assert!(render_report(&one, Units::Raw).contains("1000000000 B"));
        assert_eq!(
            render_csv(&one).lines().nth(1),
            Some("X,1000000000000000,1000000000,1,1")
        );
    }
}
