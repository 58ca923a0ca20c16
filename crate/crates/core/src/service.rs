//! Transport-independent request handlers for the query service.
//!
//! Each handler is a pure function of the loaded state and the request. The
//! HTTP layer only routes, decodes JSON and maps [`ApiError::status`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::gp::{Emulator, KernelFamily};
use crate::robustness::{
    decision_probability, default_n_e, main_effect_curve, region_extrema, sobol_indices, Criterion, EffectCurve,
    SobolReport, DEFAULT_N_S,
};
use crate::space::{Region, SpecSpace};
use crate::store::RunStore;
use crate::targets::Model;

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959964;
pub const MAX_N_E: usize = 5000;
pub const MAX_N_S: usize = 10_000;
pub const DEFAULT_SOBOL_N: usize = 1 << 13;
pub const DEFAULT_SOBOL_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub body: ApiErrorBody,
}

#[derive(Serialize)]
struct Envelope<'a> {
    error: &'a ApiErrorBody,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>, field: Option<String>) -> Self {
        ApiError {
            status,
            body: ApiErrorBody {
                code: code.to_string(),
                message: message.into(),
                field,
            },
        }
    }

    pub fn no_emulator() -> Self {
        ApiError::new(409, "NoEmulatorLoaded", "no fitted emulators are loaded", None)
    }

    /// `{"error": {"code", "message", "field"?}}`
    pub fn to_json(&self) -> String {
        serde_json::to_string(&Envelope { error: &self.body }).expect("serializable")
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::OutOfRange { field, .. } => ApiError::new(400, "OutOfRange", msg, Some(field)),
            Error::UnknownOutput(o) => ApiError::new(400, "UnknownOutput", msg, Some(o)),
            Error::UnknownInput(i) => ApiError::new(400, "UnknownInput", msg, Some(i)),
            Error::CriteriaUnknownOutput(o) => ApiError::new(422, "CriteriaUnknownOutput", msg, Some(o)),
            Error::InvalidRegion(_) | Error::EmptyRegion(_) | Error::DimensionMismatch { .. } => {
                ApiError::new(400, "BadRegion", msg, Some("region".into()))
            }
            Error::InvalidConfig(_) => ApiError::new(400, "InvalidRequest", msg, None),
            _ => ApiError::new(500, "Internal", msg, None),
        }
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

/// Immutable service state; reload swaps the whole value.
#[derive(Debug, Clone)]
pub struct ServiceState {
    pub model: Option<Model>,
    pub space: SpecSpace,
    pub emulators: Vec<Emulator>,
    pub sensitivity: Option<SobolReport>,
}

impl ServiceState {
    pub fn new(model: Option<Model>, space: SpecSpace, emulators: Vec<Emulator>) -> crate::Result<Self> {
        let sensitivity = if emulators.is_empty() {
            None
        } else {
            Some(sobol_indices(&emulators, DEFAULT_SOBOL_N, DEFAULT_SOBOL_SEED)?)
        };
        Ok(ServiceState {
            model,
            space,
            emulators,
            sensitivity,
        })
    }

    /// Loads emulators and the stored sensitivity report, computing the
    /// report if the store has none.
    pub fn from_store(store: &RunStore) -> crate::Result<Self> {
        let emulators = store.import_emulators()?;
        let sensitivity = match store.load_report_json::<SobolReport>("sensitivity") {
            Ok(r) => Some(r),
            Err(_) if !emulators.is_empty() => Some(sobol_indices(&emulators, DEFAULT_SOBOL_N, DEFAULT_SOBOL_SEED)?),
            Err(_) => None,
        };
        Ok(ServiceState {
            model: store.model(),
            space: store.space().clone(),
            emulators,
            sensitivity,
        })
    }

    fn emulator(&self, name: &str) -> ApiResult<&Emulator> {
        self.emulators
            .iter()
            .find(|e| e.output_name() == name)
            .ok_or_else(|| Error::UnknownOutput(name.to_string()).into())
    }

    fn selected(&self, outputs: &Option<Vec<String>>) -> ApiResult<Vec<&Emulator>> {
        if self.emulators.is_empty() {
            return Err(ApiError::no_emulator());
        }
        match outputs {
            None => Ok(self.emulators.iter().collect()),
            Some(names) => names.iter().map(|n| self.emulator(n)).collect(),
        }
    }

    /// Orders a name-keyed point by the space's dimensions.
    fn point(&self, x: &BTreeMap<String, f64>) -> ApiResult<Vec<f64>> {
        if let Some(k) = x.keys().find(|k| self.space.index_of(k).is_none()) {
            return Err(Error::UnknownInput(k.clone()).into());
        }
        let p = self
            .space
            .dims()
            .iter()
            .map(|d| {
                x.get(&d.name).copied().ok_or_else(|| {
                    ApiError::new(400, "MissingInput", format!("input `{}` is required", d.name), Some(d.name.clone()))
                })
            })
            .collect::<ApiResult<Vec<f64>>>()?;
        self.space.check(&p)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputInfo {
    pub name: String,
    pub family: KernelFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<f64>,
    pub variance: f64,
    pub lengths: Vec<f64>,
    pub nugget_fraction: f64,
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputsResponse {
    pub model: Option<Model>,
    pub outputs: Vec<OutputInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub x: BTreeMap<String, f64>,
    #[serde(default)]
    pub outputs: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputPrediction {
    pub output: String,
    pub mean: f64,
    pub sd: f64,
    pub ci95: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub x: BTreeMap<String, f64>,
    pub predictions: Vec<OutputPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustRequest {
    pub region: Region,
    #[serde(default)]
    pub outputs: Option<Vec<String>>,
    #[serde(default)]
    pub n_e: Option<usize>,
    #[serde(default)]
    pub n_s: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub criteria: Option<Vec<Criterion>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustOutput {
    pub output: String,
    pub max_mean: f64,
    pub min_mean: f64,
    pub midpoint: Vec<f64>,
    pub midpoint_mean: f64,
    pub midpoint_sd: f64,
    /// 5, 25, 50, 75 and 95% points of the sampled maxima.
    pub max_quantiles: Vec<f64>,
    pub min_quantiles: Vec<f64>,
    pub max_min_correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSummary {
    pub probability: f64,
    pub points: Vec<Vec<f64>>,
    pub point_probability: Vec<f64>,
    pub independent_outputs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustResponse {
    pub seed: u64,
    pub n_e: usize,
    pub n_s: usize,
    pub outputs: Vec<RobustOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_probability: Option<DecisionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectQuery {
    #[serde(default)]
    pub grid: Option<usize>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

pub fn handle_space(state: &ServiceState) -> SpecSpace {
    state.space.clone()
}

pub fn handle_outputs(state: &ServiceState) -> OutputsResponse {
    OutputsResponse {
        model: state.model,
        outputs: state
            .emulators
            .iter()
            .map(|e| OutputInfo {
                name: e.output_name().to_string(),
                family: e.kernel().family,
                smoothness: e.kernel().smoothness,
                variance: e.kernel().variance,
                lengths: e.kernel().lengths.clone(),
                nugget_fraction: e.kernel().nugget_fraction,
                n_train: e.y().len(),
            })
            .collect(),
    }
}

pub fn handle_predict(state: &ServiceState, req: &PredictRequest) -> ApiResult<PredictResponse> {
    let ems = state.selected(&req.outputs)?;
    let x = state.point(&req.x)?;
    let predictions = ems
        .iter()
        .map(|em| {
            let p = em.predict(&x)?;
            let sd = p.sd();
            Ok(OutputPrediction {
                output: em.output_name().to_string(),
                mean: p.mean,
                sd,
                ci95: [p.mean - Z95 * sd, p.mean + Z95 * sd],
            })
        })
        .collect::<crate::Result<_>>()?;
    Ok(PredictResponse {
        x: req.x.clone(),
        predictions,
    })
}

pub fn handle_robust(state: &ServiceState, req: &RobustRequest) -> ApiResult<RobustResponse> {
    let ems = state.selected(&req.outputs)?;
    req.region.validate(&state.space).map_err(|e| {
        let mut a = ApiError::from(e);
        if a.status == 400 {
            a.body.code = "BadRegion".into();
            a.body.field.get_or_insert_with(|| "region".into());
        }
        a
    })?;
    if let Some(criteria) = &req.criteria {
        if let Some(c) = criteria.iter().find(|c| state.emulator(&c.output).is_err()) {
            return Err(Error::CriteriaUnknownOutput(c.output.clone()).into());
        }
    }
    let n_e = req.n_e.unwrap_or_else(|| default_n_e(&req.region));
    let n_s = req.n_s.unwrap_or(DEFAULT_N_S);
    if n_e == 0 || n_e > MAX_N_E || n_s == 0 || n_s > MAX_N_S {
        return Err(ApiError::new(
            400,
            "InvalidRequest",
            format!("n_e must be in 1..={MAX_N_E} and n_s in 1..={MAX_N_S}"),
            None,
        ));
    }
    let outputs = ems
        .iter()
        .map(|em| {
            let r = region_extrema(em, &req.region, n_e, n_s, req.seed)?;
            Ok(RobustOutput {
                output: r.output.clone(),
                max_mean: r.max_mean,
                min_mean: r.min_mean,
                midpoint: r.midpoint.clone(),
                midpoint_mean: r.midpoint_prediction.mean,
                midpoint_sd: r.midpoint_prediction.sd(),
                max_quantiles: r.max_quantiles(),
                min_quantiles: r.min_quantiles(),
                max_min_correlation: r.max_min_correlation(),
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let decision = match &req.criteria {
        Some(c) if !c.is_empty() => {
            let d = decision_probability(&state.emulators, &req.region, c, n_e, n_s, req.seed)?;
            Some(DecisionSummary {
                probability: d.probability,
                points: d.points,
                point_probability: d.point_probability,
                independent_outputs: d.independent_outputs,
            })
        }
        _ => None,
    };
    Ok(RobustResponse {
        seed: req.seed,
        n_e,
        n_s,
        outputs,
        decision_probability: decision,
    })
}

pub fn handle_sensitivity(state: &ServiceState) -> ApiResult<SobolReport> {
    state.sensitivity.clone().ok_or_else(ApiError::no_emulator)
}

pub fn handle_effects(state: &ServiceState, output: &str, input: &str, q: &EffectQuery) -> ApiResult<EffectCurve> {
    if state.emulators.is_empty() {
        return Err(ApiError::no_emulator());
    }
    let em = state.emulator(output)?;
    let grid = q.grid.unwrap_or(21);
    let n = q.n.unwrap_or(500);
    if grid > 1000 || n > 20_000 {
        return Err(ApiError::new(400, "InvalidRequest", "grid must be <= 1000 and n <= 20000", None));
    }
    Ok(main_effect_curve(em, input, grid, n, q.seed.unwrap_or(7))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{fit, FitPolicy, TrainingSet};
    use crate::space::Interval;

    fn state() -> ServiceState {
        let space = SpecSpace::toy();
        let xs = space.lattice_design(&[7, 5]).unwrap().points;
        let f1: Vec<f64> = xs.iter().map(|x| 4.0 - 0.6 * x[0] - 0.8 * x[1]).collect();
        let f2: Vec<f64> = xs.iter().map(|x| 0.6 - 0.05 * x[0] - 0.15 * x[1] * x[1]).collect();
        let ems = [("mean_theta", f1), ("sd_theta", f2)]
            .into_iter()
            .map(|(n, y)| {
                fit(
                    &TrainingSet::new(n, space.clone(), xs.clone(), y, vec![1e-6; 35]).unwrap(),
                    &FitPolicy::FixedToy,
                )
                .unwrap()
            })
            .collect();
        ServiceState::new(Some(Model::Toy), space, ems).unwrap()
    }

    fn x(nu: f64, eps: f64) -> BTreeMap<String, f64> {
        BTreeMap::from([("nu".to_string(), nu), ("eps".to_string(), eps)])
    }

    #[test]
    fn predict_interval_and_errors() {
        let s = state();
        let r = handle_predict(&s, &PredictRequest { x: x(1.0, 0.25), outputs: None }).unwrap();
        for p in &r.predictions {
            assert_eq!(p.ci95, [p.mean - Z95 * p.sd, p.mean + Z95 * p.sd]);
            assert!(p.sd > 0.0);
        }
        let e = handle_predict(&s, &PredictRequest { x: x(9.0, 0.0), outputs: None }).unwrap_err();
        assert_eq!((e.status, e.body.code.as_str(), e.body.field.as_deref()), (400, "OutOfRange", Some("nu")));
        assert!(e.body.message.contains("[0.3, 2]"));
        let e = handle_predict(
            &s,
            &PredictRequest {
                x: x(1.0, 0.0),
                outputs: Some(vec!["nope".into()]),
            },
        )
        .unwrap_err();
        assert_eq!((e.status, e.body.code.as_str()), (400, "UnknownOutput"));
        let empty = ServiceState::new(None, SpecSpace::toy(), vec![]).unwrap();
        assert_eq!(handle_predict(&empty, &PredictRequest { x: x(1.0, 0.0), outputs: None }).unwrap_err().status, 409);
    }

    #[test]
    fn error_envelope() {
        let e = ApiError::no_emulator();
        assert_eq!(e.to_json(), r#"{"error":{"code":"NoEmulatorLoaded","message":"no fitted emulators are loaded"}}"#);
    }

    #[test]
    fn robust_point_and_replay() {
        let s = state();
        let req = RobustRequest {
            region: Region::Point { x: vec![1.5, 0.5] },
            outputs: None,
            n_e: None,
            n_s: Some(200),
            seed: 9,
            criteria: None,
        };
        let r = handle_robust(&s, &req).unwrap();
        let p = handle_predict(&s, &PredictRequest { x: x(1.5, 0.5), outputs: None }).unwrap();
        for (o, pr) in r.outputs.iter().zip(&p.predictions) {
            assert_eq!(o.max_mean, o.min_mean);
            assert!((o.max_mean - pr.mean).abs() < 4.0 * pr.sd / (200f64).sqrt() + 1e-12);
        }
        let again = handle_robust(&s, &req).unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
        assert_eq!(r.seed, 9);
    }

    #[test]
    fn robust_errors() {
        let s = state();
        let bad = RobustRequest {
            region: Region::Box {
                intervals: vec![Interval::new(1.5, 0.5), Interval::fixed(0.2)],
            },
            outputs: None,
            n_e: Some(10),
            n_s: Some(10),
            seed: 0,
            criteria: None,
        };
        let e = handle_robust(&s, &bad).unwrap_err();
        assert_eq!((e.status, e.body.code.as_str()), (400, "BadRegion"));
        let crit = RobustRequest {
            region: Region::Point { x: vec![1.5, 0.5] },
            criteria: Some(vec![Criterion::new("zzz", crate::robustness::Comparison::Lt, 1.0)]),
            ..bad
        };
        let e = handle_robust(&s, &crit).unwrap_err();
        assert_eq!((e.status, e.body.code.as_str()), (422, "CriteriaUnknownOutput"));
    }

    #[test]
    fn sensitivity_and_effects() {
        let s = state();
        let r = handle_sensitivity(&s).unwrap();
        assert_eq!(r.outputs.len(), 2);
        let c = handle_effects(&s, "mean_theta", "nu", &EffectQuery { grid: Some(7), n: Some(50), seed: None }).unwrap();
        assert_eq!(c.grid.len(), 7);
        assert_eq!(handle_effects(&s, "mean_theta", "q", &EffectQuery { grid: None, n: None, seed: None }).unwrap_err().body.code, "UnknownInput");
    }
}
