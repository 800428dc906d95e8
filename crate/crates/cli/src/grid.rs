//! `--grid key=v1,v2,...` parsing and application to scenario documents.

use dias::document::{DropRatiosDoc, PolicyDoc, ScenarioDocument};

#[derive(Debug, Clone, PartialEq)]
pub enum Key {
    /// Map drop ratio of one class. Turns P and NP into DA.
    Theta(String),
    /// Sprint timeout of one class; needs a `dias_full` policy.
    Timeout(String),
    TargetUtilization,
    Slots,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(f64),
    None,
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Number(x) => write!(f, "{x}"),
            Value::None => f.write_str("none"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub name: String,
    pub key: Key,
    pub values: Vec<Value>,
}

pub fn parse_axis(spec: &str) -> Result<Axis, String> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| format!("grid entry `{spec}` is not key=v1,v2,..."))?;
    let name = name.trim();
    let key = match name.split_once('.') {
        Some(("theta", class)) => Key::Theta(class.to_string()),
        Some(("timeout_s", class)) => Key::Timeout(class.to_string()),
        None if name == "target_utilization" => Key::TargetUtilization,
        None if name == "slots" => Key::Slots,
        _ => return Err(format!("unknown grid key `{name}`")),
    };
    let values = values
        .split(',')
        .map(|v| {
            let v = v.trim();
            if v.eq_ignore_ascii_case("none") {
                if matches!(key, Key::Timeout(_)) {
                    Ok(Value::None)
                } else {
                    Err(format!("`none` is only valid for timeout_s keys, not `{name}`"))
                }
            } else {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .map(Value::Number)
                    .ok_or_else(|| format!("bad value `{v}` for `{name}`"))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(format!("no values for `{name}`"));
    }
    Ok(Axis {
        name: name.to_string(),
        key,
        values,
    })
}

pub fn parse_axes(specs: &[String]) -> Result<Vec<Axis>, String> {
    let axes = specs.iter().map(|s| parse_axis(s)).collect::<Result<Vec<_>, _>>()?;
    for (i, a) in axes.iter().enumerate() {
        if axes[..i].iter().any(|b| b.name == a.name) {
            return Err(format!("grid key `{}` given twice", a.name));
        }
    }
    Ok(axes)
}

/// Cartesian product of value indices; the last axis varies fastest.
pub fn points(axes: &[Axis]) -> Vec<Vec<usize>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                (0..axis.values.len()).map(move |i| {
                    let mut p = prefix.clone();
                    p.push(i);
                    p
                })
            })
            .collect()
    })
}

fn class(doc: &ScenarioDocument, name: &str) -> Result<usize, String> {
    doc.class_index(name).ok_or_else(|| format!("no class named `{name}`"))
}

fn drop_ratios(policy: &mut PolicyDoc, classes: usize) -> &mut Vec<DropRatiosDoc> {
    if matches!(policy, PolicyDoc::Preemptive | PolicyDoc::NonPreemptive) {
        *policy = PolicyDoc::DifferentialApprox {
            drop_ratios: vec![DropRatiosDoc::default(); classes],
        };
    }
    match policy {
        PolicyDoc::DifferentialApprox { drop_ratios } | PolicyDoc::DiasFull { drop_ratios, .. } => drop_ratios,
        _ => unreachable!("converted above"),
    }
}

/// Scenario document for one grid point.
pub fn apply(base: &ScenarioDocument, axes: &[Axis], point: &[usize]) -> Result<ScenarioDocument, String> {
    let mut doc = base.clone();
    let classes = doc.classes.len();
    for (axis, &i) in axes.iter().zip(point) {
        let value = &axis.values[i];
        match (&axis.key, value) {
            (Key::Theta(name), Value::Number(x)) => {
                let k = class(&doc, name)?;
                let ratios = drop_ratios(&mut doc.policy, classes);
                ratios.get_mut(k).ok_or("drop_ratios shorter than classes")?.map = *x;
            }
            (Key::Timeout(name), v) => {
                let k = class(&doc, name)?;
                let PolicyDoc::DiasFull { sprint, .. } = &mut doc.policy else {
                    return Err("timeout_s keys need a dias_full policy".into());
                };
                let slot = sprint.timeouts_s.get_mut(k).ok_or("timeouts_s shorter than classes")?;
                *slot = match v {
                    Value::Number(x) => Some(*x),
                    Value::None => None,
                };
            }
            (Key::TargetUtilization, Value::Number(x)) => doc.target_utilization = Some(*x),
            (Key::Slots, Value::Number(x)) => {
                if x.fract() != 0.0 || *x < 1.0 {
                    return Err(format!("slots must be a positive integer, got {x}"));
                }
                doc.slots = *x as usize;
            }
            _ => return Err(format!("bad value {value} for `{}`", axis.name)),
        }
    }
    Ok(doc)
}
