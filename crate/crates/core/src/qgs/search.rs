use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::classify::{classify_equilibrium, linearize};
use super::integrate::{integrate_backward, integrate_forward};
use super::{EquilibriumRecord, MinimaArchive, Provenance, SearchBudget, SearchConfig, Stability, Status};
use crate::benchmarks::mse;
use crate::dataset::Dataset;
use crate::error::{QgsError, Result};
use crate::residual::Residual;
use crate::rnn::{predict, NetworkShape, ParamVector};

/// A forward-integration start point produced by an escape.
#[derive(Debug, Clone, PartialEq)]
pub struct EscapeCandidate {
    pub x: DVector<f64>,
    pub direction: String,
}

fn unit_inf(v: DVector<f64>) -> Option<DVector<f64>> {
    let n = v.amax();
    (n > 0.0 && n.is_finite()).then(|| v / n)
}

/// Leaves the stability region of a stable equilibrium.
///
/// Each of `directions` perturbations (the two signs of the eigenvector of the
/// smallest linearization eigenvalue, then random directions) is integrated
/// backward. A boundary saddle is crossed along its unstable eigenvector in
/// both signs; a run stopped by `f_cap`, or one that settles on another
/// stable point, contributes its end point. Runs that exhaust their budget
/// contribute nothing.
pub fn escape<R: Residual + ?Sized, G: Rng + ?Sized>(
    sys: &R,
    record: &EquilibriumRecord,
    cfg: &SearchConfig,
    f_cap: f64,
    directions: usize,
    rng: &mut G,
) -> Result<Vec<EscapeCandidate>> {
    if !(cfg.kick > 0.0) {
        return Err(QgsError::Precondition(format!("escape kick must be > 0, got {}", cfg.kick)));
    }
    if record.stability != Stability::Stable {
        return Err(QgsError::Precondition("escape starts from a stable equilibrium".into()));
    }
    let p = record.x.len();
    let eigvec = linearize(sys, &record.x, &cfg.classify)
        .ok()
        .and_then(|lin| unit_inf(lin.min_eigenvector()));

    let mut out = Vec::new();
    for attempt in 0..directions {
        let (label, dir) = match (attempt, &eigvec) {
            (0, Some(v)) => ("eig-min+".to_string(), v.clone()),
            (1, Some(v)) => ("eig-min-".to_string(), -v),
            _ => {
                let raw = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                match unit_inf(raw) {
                    Some(v) => (format!("random{attempt}"), v),
                    None => continue,
                }
            }
        };
        let start = &record.x + &dir * cfg.kick;
        let back = match integrate_backward(sys, &start, cfg.backward_config(), f_cap) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("escape {label}: backward integration failed: {e}");
                continue;
            }
        };
        match back.status {
            Status::BudgetExhausted => {
                log::debug!("escape {label}: backward budget exhausted");
            }
            Status::CapReached => out.push(EscapeCandidate {
                x: back.x_end,
                direction: format!("{label}/cap"),
            }),
            Status::Equilibrium => {
                let eq_tol = cfg.backward_config().equilibrium_tol;
                let rec = match classify_equilibrium(sys, &back.x_end, eq_tol, &cfg.classify) {
                    Ok(r) => r,
                    Err(e) => {
                        log::debug!("escape {label}: {e}");
                        continue;
                    }
                };
                match rec.stability {
                    Stability::Unstable => {
                        let unstable = linearize(sys, &back.x_end, &cfg.classify)
                            .ok()
                            .and_then(|lin| unit_inf(lin.min_eigenvector()));
                        if let Some(u) = unstable {
                            out.push(EscapeCandidate {
                                x: &back.x_end + &u * cfg.kick,
                                direction: format!("{label}/saddle+"),
                            });
                            out.push(EscapeCandidate {
                                x: &back.x_end - &u * cfg.kick,
                                direction: format!("{label}/saddle-"),
                            });
                        }
                    }
                    Stability::Stable => {
                        if (&back.x_end - &record.x).amax() >= cfg.dedup_distance {
                            out.push(EscapeCandidate {
                                x: back.x_end,
                                direction: format!("{label}/stable"),
                            });
                        }
                    }
                    Stability::Indeterminate => {}
                }
            }
        }
    }
    Ok(out)
}

/// Moves off a saddle along the eigenvector of its most negative curvature,
/// taking whichever sign lowers `f` more.
fn downhill_kick<R: Residual + ?Sized>(
    sys: &R,
    x: &DVector<f64>,
    f: f64,
    cfg: &SearchConfig,
) -> Option<DVector<f64>> {
    let u = unit_inf(linearize(sys, x, &cfg.classify).ok()?.min_eigenvector())?;
    let plus = x + &u * cfg.kick;
    let minus = x - &u * cfg.kick;
    let fp = sys.objective(&plus).ok()?;
    let fm = sys.objective(&minus).ok()?;
    let (best, fb) = if fp <= fm { (plus, fp) } else { (minus, fm) };
    (fb < f).then_some(best)
}

/// Why a search stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Every start point was explored and no new minimum was left to escape from.
    Exhausted,
    MaxMinima,
    EscapeBudget,
    WallClock,
}

/// End point of a forward run that was not archived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub x: DVector<f64>,
    pub f_value: f64,
    pub grad_norm: f64,
    pub status: Status,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub archive: MinimaArchive,
    pub forward_runs: usize,
    pub forward_unconverged: usize,
    pub escape_attempts: usize,
    pub restarts: usize,
    pub stop_reason: StopReason,
    /// Forward end points that did not enter the archive, either for lack of
    /// convergence or because they were not minima, in discovery order.
    pub unarchived: Vec<Endpoint>,
}

/// Alternates forward integration, classification and escapes, archiving
/// every distinct stable equilibrium. Deterministic for a given seed unless
/// the wall-clock budget cuts the search short.
pub fn search_minima<R: Residual + ?Sized>(
    sys: &R,
    x0: &DVector<f64>,
    cfg: &SearchConfig,
    budget: &SearchBudget,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    budget.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut archive = MinimaArchive::new(cfg.dedup_distance, cfg.dedup_fvalue);
    // Start point, its provenance and how many saddles its chain has crossed.
    let mut queue: VecDeque<(DVector<f64>, Provenance, usize)> = VecDeque::new();
    queue.push_back((x0.clone(), Provenance::initial(), 0));
    let mut next_start_id = 1;
    let mut forward_runs = 0;
    let mut forward_unconverged = 0;
    let mut escape_attempts = 0;
    let mut escape_budget_hit = false;
    let mut restarts_used = 0;
    let mut unarchived: Vec<Endpoint> = Vec::new();
    let mut note_unarchived = |x: &DVector<f64>, f: f64, g: f64, status: Status| {
        if f.is_finite() {
            unarchived.push(Endpoint {
                x: x.clone(),
                f_value: f,
                grad_norm: g,
                status,
            });
        }
    };

    let stop_reason = loop {
        if archive.len() >= budget.max_minima {
            break StopReason::MaxMinima;
        }
        if started.elapsed().as_secs_f64() > budget.max_wall_seconds {
            break StopReason::WallClock;
        }
        if queue.is_empty() && restarts_used < cfg.restarts {
            restarts_used += 1;
            let x = DVector::from_fn(x0.len(), |_, _| cfg.restart_sigma * rng.sample::<f64, _>(StandardNormal));
            let provenance = Provenance {
                start_id: next_start_id,
                parent: None,
                direction: format!("restart{restarts_used}"),
            };
            next_start_id += 1;
            queue.push_back((x, provenance, 0));
        }
        let Some((start, provenance, crossed)) = queue.pop_front() else {
            break if escape_budget_hit {
                StopReason::EscapeBudget
            } else {
                StopReason::Exhausted
            };
        };
        forward_runs += 1;
        let fwd = match integrate_forward(sys, &start, &cfg.integrator) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("forward run {} failed: {e}", provenance.start_id);
                forward_unconverged += 1;
                continue;
            }
        };
        if fwd.status != Status::Equilibrium {
            log::debug!(
                "forward run {} ended without equilibrium (|grad|_inf = {:e})",
                provenance.start_id,
                fwd.grad_norm_end
            );
            forward_unconverged += 1;
            note_unarchived(&fwd.x_end, fwd.f_end, fwd.grad_norm_end, fwd.status);
            continue;
        }
        let mut rec = match classify_equilibrium(sys, &fwd.x_end, cfg.integrator.equilibrium_tol, &cfg.classify) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("classification failed: {e}");
                continue;
            }
        };
        if rec.stability != Stability::Stable {
            note_unarchived(&fwd.x_end, fwd.f_end, fwd.grad_norm_end, fwd.status);
            if rec.stability == Stability::Unstable && crossed < cfg.saddle_continuations {
                if let Some(next) = downhill_kick(sys, &fwd.x_end, fwd.f_end, cfg) {
                    let direction = format!("{}/descend", provenance.direction);
                    let prov = Provenance { direction, ..provenance };
                    queue.push_front((next, prov, crossed + 1));
                }
            }
            continue;
        }
        rec.found_at = provenance;
        let Some(index) = archive.insert(rec) else {
            continue;
        };
        log::info!(
            "minimum #{index}: f = {:.6e} ({})",
            archive.records[index].f_value,
            archive.records[index].found_at.direction
        );

        let remaining = budget.max_escape_attempts - escape_attempts;
        if remaining == 0 {
            escape_budget_hit = true;
            continue;
        }
        let directions = cfg.escape_directions.min(remaining);
        escape_attempts += directions;
        let f_cap = cfg
            .f_cap
            .unwrap_or_else(|| 10.0 * archive.best_f().unwrap_or(0.0) + 1.0);
        let candidates = escape(sys, &archive.records[index], cfg, f_cap, directions, &mut rng)?;
        for c in candidates {
            queue.push_back((
                c.x,
                Provenance {
                    start_id: next_start_id,
                    parent: Some(index),
                    direction: c.direction,
                },
                0,
            ));
            next_start_id += 1;
        }
    };

    Ok(SearchOutcome {
        archive,
        forward_runs,
        forward_unconverged,
        escape_attempts,
        restarts: restarts_used,
        stop_reason,
        unarchived,
    })
}

/// Index and score of the archive record with the lowest `score`; ties go to
/// the lower `f_value`, then to the earlier record.
pub fn best_by_score<F>(archive: &MinimaArchive, mut score: F) -> Result<(usize, f64)>
where
    F: FnMut(&EquilibriumRecord) -> Result<f64>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, rec) in archive.records.iter().enumerate() {
        let s = score(rec)?;
        best = match best {
            None => Some((i, s)),
            Some((j, bs)) => {
                let better = s < bs || (s == bs && rec.f_value < archive.records[j].f_value);
                if better {
                    Some((i, s))
                } else {
                    Some((j, bs))
                }
            }
        };
    }
    best.ok_or_else(|| QgsError::Domain("cannot select from an empty archive".into()))
}

/// Picks the archived network with the lowest mean squared error on `validation`.
pub fn best_by_validation(
    archive: &MinimaArchive,
    shape: NetworkShape,
    validation: &Dataset,
) -> Result<(usize, f64)> {
    best_by_score(archive, |rec| {
        let x = ParamVector::new(shape, rec.x.clone())?;
        mse(&predict(&x, validation)?, validation.targets())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qgs::{LinearizationKind, Provenance};
    use crate::residual::FnResidual;

    fn double_well() -> FnResidual {
        FnResidual::scalar(|x| x * x - 1.0, |x| 2.0 * x)
    }

    fn stable_at(x: f64) -> EquilibriumRecord {
        classify_equilibrium(
            &double_well(),
            &DVector::from_element(1, x),
            1e-8,
            &Default::default(),
        )
        .unwrap()
    }

    #[test]
    fn double_well_escape_crosses_to_other_root() {
        let sys = double_well();
        let cfg = SearchConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cands = escape(&sys, &stable_at(1.0), &cfg, 10.0, 2, &mut rng).unwrap();
        assert!(cands.len() <= 4);
        let neg = cands.iter().find(|c| c.x[0] < 0.0).expect("a candidate past the saddle");
        let fwd = integrate_forward(&sys, &neg.x, &cfg.integrator).unwrap();
        assert_eq!(fwd.status, Status::Equilibrium);
        assert!((fwd.x_end[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn escape_candidate_count_bounded() {
        let sys = double_well();
        let cfg = SearchConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dirs in 1..6 {
            let cands = escape(&sys, &stable_at(-1.0), &cfg, 10.0, dirs, &mut rng).unwrap();
            assert!(cands.len() <= 2 * dirs);
        }
    }

    #[test]
    fn zero_kick_rejected() {
        let cfg = SearchConfig {
            kick: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = escape(&double_well(), &stable_at(1.0), &cfg, 10.0, 2, &mut rng);
        assert!(matches!(err, Err(QgsError::Precondition(_))));
    }

    #[test]
    fn search_finds_both_double_well_minima() {
        let out = search_minima(
            &double_well(),
            &DVector::from_element(1, 0.3),
            &SearchConfig::default(),
            &SearchBudget::default(),
        )
        .unwrap();
        let mut xs: Vec<f64> = out.archive.records.iter().map(|r| r.x[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs.len(), 2);
        assert!((xs[0] + 1.0).abs() < 1e-6 && (xs[1] - 1.0).abs() < 1e-6);
        assert_eq!(out.stop_reason, StopReason::Exhausted);
    }

    #[test]
    fn max_minima_clamps_archive() {
        let budget = SearchBudget {
            max_minima: 1,
            ..Default::default()
        };
        let out = search_minima(
            &double_well(),
            &DVector::from_element(1, 0.3),
            &SearchConfig::default(),
            &budget,
        )
        .unwrap();
        assert_eq!(out.archive.len(), 1);
        assert_eq!(out.stop_reason, StopReason::MaxMinima);
    }

    #[test]
    fn inequality_csp_minima_are_feasible() {
        // y <= 1 via slack, y^2 = 0.25 ; feasible set {-0.5, 0.5} in y.
        use crate::residual::SlackAugmentedCsp;
        use nalgebra::DMatrix;
        let csp = SlackAugmentedCsp::new(1)
            .with_inequalities(1, |y| y.map(|v| v - 1.0), |_| DMatrix::from_element(1, 1, 1.0))
            .with_equalities(
                1,
                |y| y.map(|v| v * v - 0.25),
                |y| DMatrix::from_element(1, 1, 2.0 * y[0]),
            );
        let out = search_minima(
            &csp,
            &DVector::from_vec(vec![0.9, 0.1]),
            &SearchConfig::default(),
            &SearchBudget::default(),
        )
        .unwrap();
        assert!(!out.archive.is_empty());
        for rec in &out.archive.records {
            assert!(rec.f_value < 1e-12);
            assert!((rec.x[0].abs() - 0.5).abs() < 1e-5);
            assert!(rec.x[0] - 1.0 <= 0.0);
        }
    }

    fn synthetic(f: f64) -> EquilibriumRecord {
        EquilibriumRecord {
            x: DVector::zeros(1),
            f_value: f,
            grad_norm: 0.0,
            stability: Stability::Stable,
            eig_min: 0.0,
            eig_max: 0.0,
            linearization: LinearizationKind::GaussNewton,
            found_at: Provenance::initial(),
        }
    }

    #[test]
    fn best_by_score_picks_argmin() {
        let mut archive = MinimaArchive::new(0.0, 0.0);
        archive.records = vec![synthetic(1.0), synthetic(2.0), synthetic(3.0)];
        let scores = [0.5, 0.1, 0.3];
        let (i, s) = best_by_score(&archive, |r| Ok(scores[r.f_value as usize - 1])).unwrap();
        assert_eq!((i, s), (1, 0.1));
    }

    #[test]
    fn best_by_score_ties() {
        let mut archive = MinimaArchive::new(0.0, 0.0);
        archive.records = vec![synthetic(2.0), synthetic(1.0), synthetic(1.0)];
        let (i, _) = best_by_score(&archive, |_| Ok(0.7)).unwrap();
        assert_eq!(i, 1);
        archive.records.truncate(1);
        assert_eq!(best_by_score(&archive, |_| Ok(9.0)).unwrap().0, 0);
        archive.records.clear();
        assert!(matches!(best_by_score(&archive, |_| Ok(0.0)), Err(QgsError::Domain(_))));
    }
}
