use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::Millis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Rollout,
    Update,
    Export,
    Eval,
}

/// What a phase holds while it runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Occupancy {
    Trainer,
    Sampler,
    /// Runs without holding either resource; the resident base idles.
    Idle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub kind: PhaseKind,
    pub duration_ms: Millis,
    pub occupies: Occupancy,
}

impl Phase {
    pub const fn new(kind: PhaseKind, duration_ms: Millis, occupies: Occupancy) -> Self {
        Self { kind, duration_ms, occupies }
    }
}

/// Ordered phases of one policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub policy_id: String,
    pub phases: Vec<Phase>,
}

impl PhasePlan {
    pub fn total_ms(&self) -> Millis {
        self.phases.iter().map(|p| p.duration_ms).sum()
    }

    /// `steps` repetitions of rollout (sampler), update (trainer), export
    /// (off-device write) and eval (sampler).
    pub fn grpo(policy_id: impl Into<String>, steps: usize, rollout: Millis, update: Millis, export: Millis, eval: Millis) -> Self {
        let step = [
            Phase::new(PhaseKind::Rollout, rollout, Occupancy::Sampler),
            Phase::new(PhaseKind::Update, update, Occupancy::Trainer),
            Phase::new(PhaseKind::Export, export, Occupancy::Idle),
            Phase::new(PhaseKind::Eval, eval, Occupancy::Sampler),
        ];
        Self { policy_id: policy_id.into(), phases: step.iter().copied().cycle().take(steps * 4).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Sequential,
    Concurrent,
}

/// Resident trainers and samplers shared by all policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resources {
    pub trainers: u32,
    pub samplers: u32,
    /// Resident base allocation held by each trainer or sampler for the whole run.
    pub base_resident_bytes: u64,
    /// Max-shape adapter slot held by each trainer.
    #[serde(default)]
    pub slot_bytes: u64,
}

impl Default for Resources {
    fn default() -> Self {
        Self { trainers: 1, samplers: 1, base_resident_bytes: 0, slot_bytes: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub policy: String,
    pub phase_index: usize,
    pub kind: PhaseKind,
    pub start_ms: Millis,
    pub end_ms: Millis,
    pub resource: Occupancy,
    pub unit: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub mode: ScheduleMode,
    pub wall_time_ms: Millis,
    pub peak_resident_bytes: u64,
    pub spans: Vec<Span>,
}

impl Timeline {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,phase,start_ms,end_ms,resource\n");
        for s in &self.spans {
            let kind = match s.kind {
                PhaseKind::Rollout => "rollout",
                PhaseKind::Update => "update",
                PhaseKind::Export => "export",
                PhaseKind::Eval => "eval",
            };
            let resource = match s.resource {
                Occupancy::Trainer => alloc::format!("trainer{}", s.unit),
                Occupancy::Sampler => alloc::format!("sampler{}", s.unit),
                Occupancy::Idle => "idle".into(),
            };
            out.push_str(&alloc::format!("{},{},{},{},{}\n", s.policy, kind, s.start_ms, s.end_ms, resource));
        }
        out
    }
}

// Residency is fixed for the run: every trainer and sampler holds one base,
// and every trainer one max-shape slot. Swapping policies never adds to it.
fn peak_resident(resources: &Resources) -> u64 {
    (resources.trainers + resources.samplers) as u64 * resources.base_resident_bytes
        + resources.trainers as u64 * resources.slot_bytes
}

fn units(resources: &Resources, occ: Occupancy) -> u32 {
    match occ {
        Occupancy::Trainer => resources.trainers.max(1),
        Occupancy::Sampler => resources.samplers.max(1),
        Occupancy::Idle => 0,
    }
}

/// Runs the plans either back to back or with greedy list scheduling.
///
/// Concurrent mode repeatedly starts the pending phase with the earliest
/// feasible start time (previous phase done and a unit of its resource free),
/// breaking ties by policy id. Plans are ordered by policy id in both modes.
pub fn simulate_schedule(plans: &[PhasePlan], mode: ScheduleMode, resources: &Resources) -> Timeline {
    let mut order: Vec<&PhasePlan> = plans.iter().collect();
    order.sort_by(|a, b| a.policy_id.cmp(&b.policy_id));
    let mut spans = Vec::new();

    match mode {
        ScheduleMode::Sequential => {
            let mut t = 0;
            for plan in &order {
                for (i, phase) in plan.phases.iter().enumerate() {
                    spans.push(Span {
                        policy: plan.policy_id.clone(),
                        phase_index: i,
                        kind: phase.kind,
                        start_ms: t,
                        end_ms: t + phase.duration_ms,
                        resource: phase.occupies,
                        unit: 0,
                    });
                    t += phase.duration_ms;
                }
            }
        }
        ScheduleMode::Concurrent => {
            let mut free_at = [
                vec![0 as Millis; units(resources, Occupancy::Trainer) as usize],
                vec![0 as Millis; units(resources, Occupancy::Sampler) as usize],
            ];
            let mut next_phase = vec![0usize; order.len()];
            let mut ready_at = vec![0 as Millis; order.len()];
            loop {
                // (start, policy position, unit)
                let mut best: Option<(Millis, usize, usize)> = None;
                for (p, plan) in order.iter().enumerate() {
                    let Some(phase) = plan.phases.get(next_phase[p]) else { continue };
                    let (start, unit) = match phase.occupies {
                        Occupancy::Idle => (ready_at[p], 0),
                        occ => {
                            let pool = &free_at[(occ == Occupancy::Sampler) as usize];
                            let (unit, &free) = pool.iter().enumerate().min_by_key(|(_, &f)| f).expect("pool non-empty");
                            (ready_at[p].max(free), unit)
                        }
                    };
                    if best.is_none_or(|(s, _, _)| start < s) {
                        best = Some((start, p, unit));
                    }
                }
                let Some((start, p, unit)) = best else { break };
                let phase = order[p].phases[next_phase[p]];
                let end = start + phase.duration_ms;
                if phase.occupies != Occupancy::Idle {
                    free_at[(phase.occupies == Occupancy::Sampler) as usize][unit] = end;
                }
                spans.push(Span {
                    policy: order[p].policy_id.clone(),
                    phase_index: next_phase[p],
                    kind: phase.kind,
                    start_ms: start,
                    end_ms: end,
                    resource: phase.occupies,
                    unit: unit as u32,
                });
                ready_at[p] = end;
                next_phase[p] += 1;
            }
        }
    }

    let wall_time_ms = spans.iter().map(|s| s.end_ms).max().unwrap_or(0);
    let peak_resident_bytes = peak_resident(resources);
    Timeline { mode, wall_time_ms, peak_resident_bytes, spans }
}

/// Three-policy GRPO plans shaped after the measured dense and MoE schedules.
///
/// `"4b"` models a dense base where sampling and training time are balanced;
/// `"30b"` a MoE base where the trainer side dominates.
pub fn reference_plans(model: &str) -> Option<Vec<PhasePlan>> {
    let (steps, rollout, update, export, eval) = match model {
        "4b" => (8, 36_000, 52_000, 14_000, 26_000),
        "30b" => (8, 100_000, 220_000, 30_000, 72_000),
        _ => return None,
    };
    Some(
        ["policy/a", "policy/b", "policy/c"]
            .iter()
            .map(|id| PhasePlan::grpo(*id, steps, rollout, update, export, eval))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn one_policy_has_nothing_to_overlap() {
        let plans = [PhasePlan::grpo("policy/a", 1, 40, 30, 5, 25)];
        let r = Resources::default();
        let seq = simulate_schedule(&plans, ScheduleMode::Sequential, &r);
        let con = simulate_schedule(&plans, ScheduleMode::Concurrent, &r);
        assert_eq!(seq.wall_time_ms, 100);
        assert_eq!(con.wall_time_ms, 100);
    }

    #[test]
    fn idle_phases_need_no_resource() {
        let plans: Vec<PhasePlan> = ["policy/a", "policy/b"]
            .iter()
            .map(|id| PhasePlan { policy_id: id.to_string(), phases: vec![Phase::new(PhaseKind::Eval, 10, Occupancy::Idle)] })
            .collect();
        let con = simulate_schedule(&plans, ScheduleMode::Concurrent, &Resources::default());
        assert_eq!(con.wall_time_ms, 10);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let plans = [PhasePlan::grpo("policy/a", 1, 40, 30, 5, 25)];
        let csv = simulate_schedule(&plans, ScheduleMode::Sequential, &Resources::default()).to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "policy,phase,start_ms,end_ms,resource");
        assert_eq!(lines[1], "policy/a,rollout,0,40,sampler0");
        assert_eq!(lines.len(), 5);
    }
}
