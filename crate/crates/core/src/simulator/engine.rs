use std::collections::VecDeque;
use std::iter::Peekable;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{percentile, Attempt, ClassMetrics, JobRecord, SimulationMetrics};
use super::plan::{ClassSampler, RawPlan, Segments};
use super::{ArrivalSource, Result, Scenario, SimError, SprintConfig};

// independent random streams so that, for example, changing drop ratios
// does not shift the arrival sequence
const ARRIVAL_STREAM: u64 = 1;
const PLAN_STREAM: u64 = 2;
const REDRAW_STREAM: u64 = 3;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// The job currently holding the engine.
struct Running {
    job: usize,
    class: usize,
    dispatch: f64,
    segments: Segments,
    seg: usize,
    next: usize,
    /// Work-clock marks at which in-flight tasks finish.
    inflight: Vec<f64>,
    /// Base-speed work done by this attempt so far.
    work: f64,
    speed: f64,
    sprinting: bool,
    timer: Option<f64>,
}

impl Running {
    fn fill(&mut self, slots: usize) {
        let seg = &self.segments[self.seg];
        while self.inflight.len() < slots && self.next < seg.len() {
            self.inflight.push(self.work + seg[self.next]);
            self.next += 1;
        }
    }

    fn next_finish(&self) -> Option<f64> {
        self.inflight.iter().copied().reduce(f64::min)
    }

    /// Retires tasks finished at the current work mark; returns true when
    /// the whole job is done.
    fn retire(&mut self, slots: usize) -> bool {
        let w = self.work;
        self.inflight.retain(|&f| f > w);
        self.fill(slots);
        while self.inflight.is_empty() && self.next == self.segments[self.seg].len() {
            self.seg += 1;
            if self.seg == self.segments.len() {
                return true;
            }
            self.next = 0;
            self.fill(slots);
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EngineEvent {
    Finish(f64),
    BudgetExhausted,
    SprintTimer,
}

struct Budget {
    level: f64,
    cap: f64,
    replenish: f64,
    premium: f64,
    speed_factor: f64,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    samplers: Vec<ClassSampler>,
    order: Vec<usize>,
    priority: Vec<u32>,
    evicts: bool,
    sprint: Option<&'a SprintConfig>,
    budget: Option<Budget>,
    slots: usize,
    records: Vec<JobRecord>,
    plans: Vec<Option<RawPlan>>,
    buffers: Vec<VecDeque<usize>>,
    running: Option<Running>,
    plan_rng: ChaCha8Rng,
    redraw_rng: ChaCha8Rng,
    now: f64,
    busy: f64,
    idle: f64,
    sprint_time: f64,
    wasted: f64,
    evictions: usize,
}

impl Sim<'_> {
    fn advance(&mut self, to: f64) {
        let dt = (to - self.now).max(0.0);
        let mut sprinting = false;
        if let Some(r) = &mut self.running {
            self.busy += dt;
            r.work += dt * r.speed;
            sprinting = r.sprinting;
        } else {
            self.idle += dt;
        }
        if let Some(b) = &mut self.budget {
            if sprinting {
                self.sprint_time += dt;
                b.level = (b.level - b.premium * dt).max(0.0);
            } else {
                b.level = (b.level + b.replenish * dt).min(b.cap.max(b.level));
            }
        }
        self.now = to.max(self.now);
    }

    fn next_engine_event(&self) -> Option<(f64, EngineEvent)> {
        let r = self.running.as_ref()?;
        let mut best: Option<(f64, EngineEvent)> = None;
        let mut consider = |t: f64, e: EngineEvent| {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, e));
            }
        };
        // ties resolve in the order considered
        if let Some(f) = r.next_finish() {
            consider(self.now + ((f - r.work) / r.speed).max(0.0), EngineEvent::Finish(f));
        }
        if r.sprinting {
            if let Some(b) = &self.budget {
                consider(self.now + b.level / b.premium, EngineEvent::BudgetExhausted);
            }
        } else if let Some(t) = r.timer {
            consider(t.max(self.now), EngineEvent::SprintTimer);
        }
        best
    }

    fn dispatch(&mut self) {
        debug_assert!(self.running.is_none());
        let Some(class) = self.order.iter().copied().find(|&c| !self.buffers[c].is_empty()) else {
            return;
        };
        let job = self.buffers[class].pop_front().expect("non-empty buffer");
        let plan = self.plans[job].take().expect("queued job has a plan");
        let segments = self.samplers[class].deflate(&plan);
        let timer = self
            .sprint
            .and_then(|s| s.timeouts[class])
            .map(|t| self.now + t);
        let mut r = Running {
            job,
            class,
            dispatch: self.now,
            segments,
            seg: 0,
            next: 0,
            inflight: Vec::new(),
            work: 0.0,
            speed: 1.0,
            sprinting: false,
            timer,
        };
        r.fill(self.slots);
        self.running = Some(r);
    }

    fn arrive(&mut self, class: usize) {
        let id = self.records.len();
        let plan = self.samplers[class].draw(&mut self.plan_rng);
        self.records.push(JobRecord {
            id: id as u64,
            class,
            arrival: self.now,
            attempts: Vec::new(),
            sprint_start: None,
            sprint_end: None,
            completion: None,
            task_counts: plan.counts().to_vec(),
            measured: self.now >= self.scenario.warmup,
        });
        self.plans.push(Some(plan));
        self.buffers[class].push_back(id);
        match &self.running {
            None => self.dispatch(),
            Some(r) if self.evicts && self.priority[class] > self.priority[r.class] => {
                self.evict();
                self.dispatch();
            }
            Some(_) => {}
        }
    }

    fn evict(&mut self) {
        let r = self.running.take().expect("evicting a running job");
        let rec = &mut self.records[r.job];
        rec.attempts.push(Attempt {
            dispatch: r.dispatch,
            end: self.now,
            evicted: true,
        });
        self.wasted += self.now - r.dispatch;
        self.evictions += 1;
        let counts = rec.task_counts.clone();
        self.plans[r.job] = Some(self.samplers[r.class].redraw(counts, &mut self.redraw_rng));
        self.buffers[r.class].push_front(r.job);
    }

    fn handle(&mut self, event: EngineEvent) {
        let now = self.now;
        let slots = self.slots;
        let r = self.running.as_mut().expect("engine events need a running job");
        match event {
            EngineEvent::Finish(mark) => {
                r.work = mark;
                if r.retire(slots) {
                    let r = self.running.take().expect("running");
                    let rec = &mut self.records[r.job];
                    rec.attempts.push(Attempt {
                        dispatch: r.dispatch,
                        end: now,
                        evicted: false,
                    });
                    rec.completion = Some(now);
                    if r.sprinting {
                        rec.sprint_end = Some(now);
                    }
                    self.dispatch();
                }
            }
            EngineEvent::BudgetExhausted => {
                if let Some(b) = &mut self.budget {
                    b.level = 0.0;
                }
                r.sprinting = false;
                r.speed = 1.0;
                self.records[r.job].sprint_end = Some(now);
            }
            EngineEvent::SprintTimer => {
                r.timer = None;
                if let Some(b) = &self.budget {
                    if b.level > 0.0 {
                        r.sprinting = true;
                        r.speed = b.speed_factor;
                        self.records[r.job].sprint_start = Some(now);
                    }
                }
            }
        }
    }

    fn finish(self) -> Result<SimulationMetrics> {
        let scenario = self.scenario;
        let mut classes = Vec::with_capacity(scenario.classes.len());
        let mut measured_total = 0;
        for (k, c) in scenario.classes.iter().enumerate() {
            let done: Vec<&JobRecord> = self
                .records
                .iter()
                .filter(|r| r.class == k && r.measured && r.completion.is_some())
                .collect();
            measured_total += done.len();
            let n = done.len();
            let mean = |f: &dyn Fn(&JobRecord) -> Option<f64>| {
                if n == 0 {
                    0.0
                } else {
                    done.iter().filter_map(|r| f(r)).sum::<f64>() / n as f64
                }
            };
            let mut responses: Vec<f64> = done.iter().filter_map(|r| r.response()).collect();
            responses.sort_by(f64::total_cmp);
            classes.push(ClassMetrics {
                name: c.name.clone(),
                priority: c.priority,
                jobs: n,
                mean_response_s: mean(&JobRecord::response),
                p95_response_s: if n == 0 { 0.0 } else { percentile(&responses, 0.95) },
                mean_queueing_s: mean(&JobRecord::queueing),
                mean_execution_s: mean(&JobRecord::execution),
            });
        }
        if measured_total == 0 {
            return Err(SimError::HorizonTooShort);
        }
        let p = scenario.power;
        let energy = p.base_w * (self.busy - self.sprint_time) + p.sprint_w * self.sprint_time + p.idle_w * self.idle;
        Ok(SimulationMetrics {
            classes,
            resource_waste: if self.busy > 0.0 { self.wasted / self.busy } else { 0.0 },
            energy_j: energy,
            busy_time_s: self.busy,
            sprint_time_s: self.sprint_time,
            wasted_time_s: self.wasted,
            idle_time_s: self.idle,
            makespan_s: self.now,
            evictions: self.evictions,
            log: self.records,
        })
    }
}

/// Runs one replication of the scenario to completion.
///
/// Arrivals are generated up to the horizon; the engine then drains every
/// queued job. Class metrics cover jobs arriving at or after the warmup.
pub fn run(scenario: &Scenario) -> Result<SimulationMetrics> {
    scenario.validate()?;
    let samplers = scenario
        .classes
        .iter()
        .zip(&scenario.policy.drop_ratios)
        .map(|(c, d)| ClassSampler::new(c, *d, &scenario.cluster))
        .collect::<Result<Vec<_>>>()?;
    let sprint = scenario.policy.sprint.as_ref();
    let budget = sprint.map(|s| Budget {
        level: s.budget,
        cap: s.budget_cap,
        replenish: s.replenish_rate,
        premium: scenario.power.sprint_w - scenario.power.base_w,
        speed_factor: s.speed_factor,
    });
    let horizon = scenario.horizon;
    let mut arrivals: Peekable<Box<dyn Iterator<Item = (f64, usize)>>> = match &scenario.arrivals {
        ArrivalSource::Mmap(p) => {
            let it = p
                .stream(rng(scenario.seed, ARRIVAL_STREAM))?
                .map(|a| (a.time, a.class))
                .take_while(move |a| a.0 <= horizon);
            (Box::new(it) as Box<dyn Iterator<Item = (f64, usize)>>).peekable()
        }
        ArrivalSource::Trace(t) => {
            let it = t.clone().into_iter().take_while(move |a| a.0 <= horizon);
            (Box::new(it) as Box<dyn Iterator<Item = (f64, usize)>>).peekable()
        }
    };

    let mut sim = Sim {
        scenario,
        samplers,
        order: scenario.priority_order(),
        priority: scenario.classes.iter().map(|c| c.priority).collect(),
        evicts: scenario.policy.kind.evicts(),
        sprint,
        budget,
        slots: scenario.cluster.slots,
        records: Vec::new(),
        plans: Vec::new(),
        buffers: vec![VecDeque::new(); scenario.classes.len()],
        running: None,
        plan_rng: rng(scenario.seed, PLAN_STREAM),
        redraw_rng: rng(scenario.seed, REDRAW_STREAM),
        now: 0.0,
        busy: 0.0,
        idle: 0.0,
        sprint_time: 0.0,
        wasted: 0.0,
        evictions: 0,
    };

    loop {
        let next_arrival = arrivals.peek().copied();
        let engine = sim.next_engine_event();
        match (next_arrival, engine) {
            (None, None) => break,
            (Some((ta, _)), Some((te, ev))) if te <= ta => {
                sim.advance(te);
                sim.handle(ev);
            }
            (None, Some((te, ev))) => {
                sim.advance(te);
                sim.handle(ev);
            }
            (Some((ta, class)), _) => {
                arrivals.next();
                sim.advance(ta);
                sim.arrive(class);
            }
        }
    }
    sim.finish()
}
