//! Closed-form FLOPs and memory-traffic model of one Gated-MLP forward pass.
//!
//! Every method is expressed as the list of line items of its pipeline
//! (GEMVs, elementwise stages, buffer reads and writes). Totals are plain
//! sums of those items. Traffic is counted in scalar elements; the "MB"
//! figure divides the element count by `2^20`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsity::{alive_count_for, SparsityMethod};

/// FLOPs charged per SiLU evaluation.
pub const SILU_FLOPS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMethod {
    Dense,
    Cats,
    #[serde(rename = "mc")]
    MCountdown,
    #[serde(rename = "dc")]
    DCountdown,
}

impl CostMethod {
    pub const ALL: [CostMethod; 4] = [
        CostMethod::Dense,
        CostMethod::Cats,
        CostMethod::MCountdown,
        CostMethod::DCountdown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostMethod::Dense => "dense",
            CostMethod::Cats => "cats",
            CostMethod::MCountdown => "mc",
            CostMethod::DCountdown => "dc",
        }
    }

    /// Uppercase label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            CostMethod::Dense => "Dense",
            CostMethod::Cats => "CATS",
            CostMethod::MCountdown => "MC",
            CostMethod::DCountdown => "DC",
        }
    }
}

impl From<SparsityMethod> for CostMethod {
    fn from(m: SparsityMethod) -> Self {
        match m {
            SparsityMethod::Cats => CostMethod::Cats,
            SparsityMethod::MCountdown => CostMethod::MCountdown,
            SparsityMethod::DCountdown => CostMethod::DCountdown,
        }
    }
}

impl std::str::FromStr for CostMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(CostMethod::Dense),
            "cats" => Ok(CostMethod::Cats),
            "mc" | "m-countdown" => Ok(CostMethod::MCountdown),
            "dc" | "d-countdown" => Ok(CostMethod::DCountdown),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

/// Layer shape plus the retained column count `s_alive`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub d_model: u64,
    pub d_inter: u64,
    pub d_rank: u64,
    pub c_act: u64,
    pub s_alive: u64,
}

impl ShapeSpec {
    /// Dense shape (`s_alive = d_inter`) with SiLU cost.
    pub fn new(d_model: u64, d_inter: u64, d_rank: u64) -> Self {
        Self {
            d_model,
            d_inter,
            d_rank,
            c_act: SILU_FLOPS,
            s_alive: d_inter,
        }
    }

    /// Llama-3.1-8B MLP: `d_model = 4096`, `d_inter = 14336`, predictor rank 512.
    pub fn llama3_8b() -> Self {
        Self::new(4096, 14336, 512)
    }

    pub fn with_k(self, k: f64) -> Self {
        self.with_alive(alive_count_for(k, self.d_inter as usize) as u64)
    }

    pub fn with_alive(mut self, s_alive: u64) -> Self {
        self.s_alive = s_alive;
        self
    }

    pub fn with_c_act(mut self, c_act: u64) -> Self {
        self.c_act = c_act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_inter == 0 {
            return Err(Error::InvalidArgument("shape dimensions must be positive".into()));
        }
        if self.s_alive > self.d_inter {
            return Err(Error::InvalidArgument(format!(
                "s_alive = {} exceeds d_inter = {}",
                self.s_alive, self.d_inter
            )));
        }
        Ok(())
    }
}

pub fn flops_dense(sp: &ShapeSpec) -> u64 {
    flops_terms(CostMethod::Dense, sp).iter().map(|t| t.1).sum()
}

pub fn flops_cats(sp: &ShapeSpec) -> u64 {
    flops_terms(CostMethod::Cats, sp).iter().map(|t| t.1).sum()
}

pub fn flops_mc(sp: &ShapeSpec) -> u64 {
    flops_terms(CostMethod::MCountdown, sp).iter().map(|t| t.1).sum()
}

pub fn flops_dc(sp: &ShapeSpec) -> u64 {
    flops_terms(CostMethod::DCountdown, sp).iter().map(|t| t.1).sum()
}

/// FLOPs line items `(description, count)`.
pub fn flops_terms(method: CostMethod, sp: &ShapeSpec) -> Vec<(&'static str, u64)> {
    let (dm, di, dr, s, c) = (sp.d_model, sp.d_inter, sp.d_rank, sp.s_alive, sp.c_act);
    match method {
        CostMethod::Dense => vec![
            ("full GEMV x3", 6 * dm * di),
            ("full activation", c * di),
            ("full product", di),
        ],
        CostMethod::Cats => vec![
            ("full GEMV W_gate", 2 * dm * di),
            ("full activation", c * di),
            ("abs and threshold", 2 * di),
            ("sparse GEMV W_up", 2 * dm * s),
            ("sparse product", s),
            ("sparse GEMV W_down", 2 * dm * s),
        ],
        CostMethod::MCountdown => vec![
            ("full GEMV W_up", 2 * dm * di),
            ("abs and threshold", 2 * di),
            ("sparse GEMV W_gate", 2 * dm * s),
            ("sparse activation", c * s),
            ("sparse product", s),
            ("sparse GEMV W_down", 2 * dm * s),
        ],
        CostMethod::DCountdown => vec![
            ("low-rank GEMV theta_A", 2 * dm * dr),
            ("low-rank GEMV theta_B", 2 * dr * di),
            ("threshold", di),
            ("sparse GEMV W_gate, W_up", 4 * dm * s),
            ("sparse activation", c * s),
            ("sparse product", s),
            ("sparse GEMV W_down", 2 * dm * s),
        ],
    }
}

/// Which counter of an instrumented executor a traffic item lands in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficKind {
    WeightRead,
    VectorRead,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrafficTerm {
    pub label: &'static str,
    pub kind: TrafficKind,
    pub elements: u64,
}

const fn term(label: &'static str, kind: TrafficKind, elements: u64) -> TrafficTerm {
    TrafficTerm {
        label,
        kind,
        elements,
    }
}

/// Memory-traffic line items in pipeline order.
pub fn traffic_terms(method: CostMethod, sp: &ShapeSpec) -> Vec<TrafficTerm> {
    use TrafficKind::*;
    let (dm, di, dr, s) = (sp.d_model, sp.d_inter, sp.d_rank, sp.s_alive);
    match method {
        CostMethod::Dense => vec![
            term("read full W_up, W_gate", WeightRead, 2 * dm * di),
            term("read x (x2)", VectorRead, 2 * dm),
            term("write gate, up", Write, 2 * di),
            term("read gate", VectorRead, di),
            term("write act_gate", Write, di),
            term("read act_gate, up", VectorRead, 2 * di),
            term("write inter", Write, di),
            term("read full W_down", WeightRead, dm * di),
            term("read inter", VectorRead, di),
            term("write y", Write, dm),
        ],
        CostMethod::Cats => vec![
            term("read full W_gate", WeightRead, dm * di),
            term("read x", VectorRead, dm),
            term("write gate", Write, di),
            term("read gate", VectorRead, di),
            term("write act_gate", Write, di),
            term("read act_gate", VectorRead, di),
            term("write abs_act_gate", Write, di),
            term("read abs_act_gate", VectorRead, di),
            term("write mask", Write, di),
            term("read sparse W_up", WeightRead, dm * s),
            term("read x", VectorRead, dm),
            term("read sparse act_gate", VectorRead, s),
            term("read mask", VectorRead, di),
            term("write inter", Write, di),
            term("read sparse W_down", WeightRead, dm * s),
            term("read inter", VectorRead, di),
            term("write y", Write, dm),
        ],
        CostMethod::MCountdown => vec![
            term("read full W_up", WeightRead, dm * di),
            term("read x", VectorRead, dm),
            term("write up", Write, di),
            term("read up", VectorRead, di),
            term("write abs_up", Write, di),
            term("read abs_up", VectorRead, di),
            term("write mask", Write, di),
            term("read sparse W_gate", WeightRead, dm * s),
            term("read x", VectorRead, dm),
            term("read sparse up", VectorRead, s),
            term("read mask", VectorRead, di),
            term("write inter", Write, di),
            term("read sparse W_down", WeightRead, dm * s),
            term("read inter", VectorRead, di),
            term("write y", Write, dm),
        ],
        CostMethod::DCountdown => vec![
            term("read theta_A", WeightRead, dm * dr),
            term("read x", VectorRead, dm),
            term("write latent", Write, dr),
            term("read theta_B", WeightRead, dr * di),
            term("read latent", VectorRead, dr),
            term("write s_hat", Write, di),
            term("read s_hat", VectorRead, di),
            term("write mask", Write, di),
            term("read sparse W_up, W_gate", WeightRead, 2 * dm * s),
            term("read x", VectorRead, dm),
            term("read mask", VectorRead, di),
            term("write inter", Write, di),
            term("read sparse W_down", WeightRead, dm * s),
            term("read inter", VectorRead, di),
            term("write y", Write, dm),
        ],
    }
}

/// Sum of traffic items of one kind.
pub fn traffic_by_kind(method: CostMethod, sp: &ShapeSpec, kind: TrafficKind) -> u64 {
    traffic_terms(method, sp)
        .iter()
        .filter(|t| t.kind == kind)
        .map(|t| t.elements)
        .sum()
}

pub fn traffic(method: CostMethod, sp: &ShapeSpec) -> u64 {
    traffic_terms(method, sp).iter().map(|t| t.elements).sum()
}

pub fn traffic_dense(sp: &ShapeSpec) -> u64 {
    traffic(CostMethod::Dense, sp)
}

pub fn traffic_cats(sp: &ShapeSpec) -> u64 {
    traffic(CostMethod::Cats, sp)
}

pub fn traffic_mc(sp: &ShapeSpec) -> u64 {
    traffic(CostMethod::MCountdown, sp)
}

pub fn traffic_dc(sp: &ShapeSpec) -> u64 {
    traffic(CostMethod::DCountdown, sp)
}

pub fn flops(method: CostMethod, sp: &ShapeSpec) -> u64 {
    flops_terms(method, sp).iter().map(|t| t.1).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostReport {
    pub method: CostMethod,
    pub k: f64,
    pub s_alive: u64,
    pub flops: u64,
    pub traffic_elements: u64,
    pub traffic_mb: f64,
}

impl CostReport {
    pub fn flops_m(&self) -> f64 {
        self.flops as f64 / 1e6
    }
}

/// Cost of one forward pass. For `Dense`, `k` is reported as 0 and the
/// shape's `s_alive` is ignored.
pub fn cost_report(method: CostMethod, sp: &ShapeSpec, k: f64) -> CostReport {
    let (sp, k) = match method {
        CostMethod::Dense => (sp.with_alive(sp.d_inter), 0.0),
        _ => (*sp, k),
    };
    let traffic_elements = traffic(method, &sp);
    CostReport {
        method,
        k,
        s_alive: sp.s_alive,
        flops: flops(method, &sp),
        traffic_elements,
        traffic_mb: traffic_elements as f64 / (1u64 << 20) as f64,
    }
}

/// Dense row followed by every sparse method at every `k`.
pub fn cost_table(base: &ShapeSpec, ks: &[f64]) -> Result<Vec<CostReport>> {
    base.validate()?;
    let mut rows = vec![cost_report(CostMethod::Dense, base, 0.0)];
    for &k in ks {
        crate::sparsity::check_ratio(k)?;
        let sp = base.with_k(k);
        for method in [CostMethod::Cats, CostMethod::MCountdown, CostMethod::DCountdown] {
            rows.push(cost_report(method, &sp, k));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn llama(k: f64) -> ShapeSpec {
        ShapeSpec::llama3_8b().with_k(k)
    }

    #[test]
    fn closed_forms_match_polynomials() {
        for k in [0.1, 0.5, 0.7, 0.9] {
            let sp = ShapeSpec::new(37, 211, 13).with_k(k).with_c_act(7);
            let (dm, di, dr, s, c) = (sp.d_model, sp.d_inter, sp.d_rank, sp.s_alive, sp.c_act);
            assert_eq!(flops_dense(&sp), 6 * dm * di + c * di + di);
            assert_eq!(flops_cats(&sp), 2 * dm * di + c * di + 2 * di + 4 * dm * s + s);
            assert_eq!(flops_mc(&sp), 2 * dm * di + 2 * di + 4 * dm * s + c * s + s);
            assert_eq!(flops_dc(&sp), 2 * dm * dr + 2 * dr * di + di + 6 * dm * s + c * s + s);
            assert_eq!(traffic_dense(&sp), 3 * dm * di + 3 * dm + 8 * di);
            assert_eq!(traffic_cats(&sp), dm * di + 2 * dm * s + 3 * dm + 10 * di + s);
            assert_eq!(traffic_mc(&sp), dm * di + 2 * dm * s + 3 * dm + 8 * di + s);
            assert_eq!(
                traffic_dc(&sp),
                dm * dr + dr * di + 3 * dm * s + 3 * dm + 2 * dr + 6 * di
            );
        }
    }

    #[test]
    fn llama_reference_cells() {
        let dense = ShapeSpec::llama3_8b();
        assert_eq!(flops_dense(&dense), 352_407_552);
        assert_eq!(traffic_dense(&dense), 176_287_744);
        assert_eq!(flops_cats(&llama(0.7)), 187_996_364);
        assert_eq!(traffic_cats(&llama(0.7)), 94_105_804);
        assert_eq!(format!("{:.2}", flops_dc(&llama(0.9)) as f64 / 1e6), "54.11");
        assert_eq!(
            format!("{:.3}", traffic_mc(&llama(0.8)) as f64 / (1u64 << 20) as f64),
            "78.522"
        );
    }

    #[test]
    fn monotone_in_alive_count() {
        let base = ShapeSpec::new(64, 256, 16);
        for method in [CostMethod::Cats, CostMethod::MCountdown, CostMethod::DCountdown] {
            for s in 0..256 {
                let a = base.with_alive(s);
                let b = base.with_alive(s + 1);
                assert!(flops(method, &a) < flops(method, &b));
                assert!(traffic(method, &a) < traffic(method, &b));
            }
        }
    }

    #[test]
    fn mc_cheaper_than_cats_below_full() {
        for c_act in 2..8 {
            let base = ShapeSpec::new(32, 100, 8).with_c_act(c_act);
            for s in 0..100 {
                let sp = base.with_alive(s);
                assert!(flops_mc(&sp) < flops_cats(&sp));
            }
        }
    }

    #[test]
    fn table_layout() {
        let rows = cost_table(&ShapeSpec::llama3_8b(), &[0.8]).unwrap();
        let names: Vec<_> = rows.iter().map(|r| r.method.name()).collect();
        assert_eq!(names, ["dense", "cats", "mc", "dc"]);
        assert_eq!(rows[0].k, 0.0);
        assert!(cost_table(&ShapeSpec::llama3_8b(), &[1.0]).is_err());
    }

    #[test]
    fn parses_method_names() {
        assert_eq!("MC".parse::<CostMethod>().unwrap(), CostMethod::MCountdown);
        assert!("relu".parse::<CostMethod>().is_err());
    }
}
