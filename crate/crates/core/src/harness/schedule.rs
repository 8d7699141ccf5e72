use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Ordered, disjoint class sets covering `0..total_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskSchedule {
    pub name: String,
    pub total_classes: usize,
    pub tasks: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(Vec::len).collect()
    }

    /// Classes of tasks `0..=t`.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        self.tasks[..=t].iter().flatten().copied().collect()
    }

    /// Task owning `class`.
    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|c| c.contains(&class))
    }
}

const UNIFORM: [f64; 5] = [20.0, 20.0, 20.0, 20.0, 20.0];
const INCREASING: [f64; 5] = [10.0, 15.0, 20.0, 25.0, 30.0];
const DECREASING: [f64; 5] = [30.0, 25.0, 20.0, 15.0, 10.0];
const FLUCTUATING: [f64; 5] = [10.0, 30.0, 5.0, 40.0, 15.0];

/// Builds a schedule from a scenario string:
///
/// * `B{X}-Inc{Y}`: `X` base classes then `Y` per task (a smaller final task
///   takes any remainder);
/// * `uniform`, `increasing`, `decreasing`, `fluctuating`: five-task
///   templates scaled to `total_classes`;
/// * `random-increase`: sizes drawn uniformly from `1..=total/3`;
/// * `sizes:a,b,c`: explicit sizes that must sum to `total_classes`.
///
/// Class ids are assigned to tasks by a seeded shuffle.
pub fn build_schedule(spec: &str, total_classes: usize, seed: u64) -> Result<TaskSchedule> {
    if total_classes == 0 {
        return Err(Error::Usage("a schedule needs at least one class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = spec.trim();
    let sizes = match spec.to_ascii_lowercase().as_str() {
        "uniform" => scale_template(&UNIFORM, total_classes)?,
        "increasing" => scale_template(&INCREASING, total_classes)?,
        "decreasing" => scale_template(&DECREASING, total_classes)?,
        "fluctuating" => scale_template(&FLUCTUATING, total_classes)?,
        "random-increase" => random_sizes(total_classes, &mut rng),
        s if s.starts_with("sizes:") => parse_sizes(&s["sizes:".len()..], total_classes)?,
        s if s.starts_with('b') => bx_incy(spec, total_classes)?,
        _ => return Err(Error::Usage(format!("unknown schedule `{spec}`"))),
    };
    let mut classes: Vec<usize> = (0..total_classes).collect();
    classes.shuffle(&mut rng);
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for n in sizes {
        tasks.push(classes[start..start + n].to_vec());
        start += n;
    }
    Ok(TaskSchedule {
        name: spec.to_string(),
        total_classes,
        tasks,
    })
}

/// Explicit-size schedule with seeded class assignment.
pub fn schedule_from_sizes(
    sizes: &[usize],
    total_classes: usize,
    seed: u64,
) -> Result<TaskSchedule> {
    let list = sizes
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",");
    build_schedule(&format!("sizes:{list}"), total_classes, seed)
}

fn bx_incy(spec: &str, total: usize) -> Result<Vec<usize>> {
    let bad = || Error::Usage(format!("`{spec}` is not of the form BX-IncY"));
    let lower = spec.to_ascii_lowercase();
    let (b, inc) = lower[1..].split_once("-inc").ok_or_else(bad)?;
    let base: usize = b.parse().map_err(|_| bad())?;
    let step: usize = inc.parse().map_err(|_| bad())?;
    if step == 0 {
        return Err(Error::Usage(format!(
            "`{spec}`: increment must be positive"
        )));
    }
    if base > total {
        return Err(Error::Usage(format!(
            "`{spec}`: {base} base classes exceed {total}"
        )));
    }
    let mut sizes = Vec::new();
    if base > 0 {
        sizes.push(base);
    }
    let mut left = total - base;
    while left > 0 {
        let n = step.min(left);
        sizes.push(n);
        left -= n;
    }
    Ok(sizes)
}

fn parse_sizes(list: &str, total: usize) -> Result<Vec<usize>> {
    let sizes = list
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Usage(format!("bad task size `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if sizes.contains(&0) {
        return Err(Error::Usage("task sizes must be positive".into()));
    }
    let sum: usize = sizes.iter().sum();
    if sum != total {
        return Err(Error::Usage(format!(
            "task sizes sum to {sum}, expected {total}"
        )));
    }
    Ok(sizes)
}

/// Largest-remainder scaling with every task keeping at least one class;
/// ties go to the lower index.
pub fn scale_template(template: &[f64], total: usize) -> Result<Vec<usize>> {
    let k = template.len();
    if total < k {
        return Err(Error::Usage(format!(
            "{total} classes cannot fill {k} tasks"
        )));
    }
    let sum: f64 = template.iter().sum();
    let spare = (total - k) as f64;
    let exact: Vec<f64> = template.iter().map(|w| w / sum * total as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| (e.floor() as usize).max(1)).collect();
    let mut assigned: usize = sizes.iter().sum();
    if assigned > total {
        // the minimum of one overshot: give every task one and share the rest
        let extra: Vec<f64> = template.iter().map(|w| w / sum * spare).collect();
        sizes = extra.iter().map(|e| 1 + e.floor() as usize).collect();
        assigned = sizes.iter().sum();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            (extra[b] - extra[b].floor())
                .total_cmp(&(extra[a] - extra[a].floor()))
                .then(a.cmp(&b))
        });
        for &i in order.iter().take(total - assigned) {
            sizes[i] += 1;
        }
        return Ok(sizes);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

fn random_sizes(total: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let hi = (total / 3).max(1);
    let mut sizes = Vec::new();
    let mut left = total;
    while left > 0 {
        let n = rng.random_range(1..=hi).min(left);
        sizes.push(n);
        left -= n;
    }
    sizes
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn bx_incy_sizes() {
        assert_eq!(
            build_schedule("B50-Inc10", 100, 0).unwrap().sizes(),
            vec![50, 10, 10, 10, 10, 10]
        );
        assert_eq!(build_schedule("B0-Inc2", 8, 0).unwrap().sizes(), vec![2; 4]);
        assert_eq!(
            build_schedule("B0-Inc3", 8, 0).unwrap().sizes(),
            vec![3, 3, 2]
        );
        assert!(build_schedule("B0-Inc0", 8, 0).is_err());
        assert!(build_schedule("B9-Inc1", 8, 0).is_err());
        assert!(build_schedule("B-Inc1", 8, 0).is_err());
    }

    #[test]
    fn templates() {
        assert_eq!(
            build_schedule("fluctuating", 100, 0).unwrap().sizes(),
            vec![10, 30, 5, 40, 15]
        );
        assert_eq!(
            build_schedule("increasing", 100, 0).unwrap().sizes(),
            vec![10, 15, 20, 25, 30]
        );
        assert_eq!(
            build_schedule("uniform", 10, 0).unwrap().sizes(),
            vec![2; 5]
        );
        assert_eq!(
            build_schedule("decreasing", 10, 0).unwrap().sizes(),
            vec![3, 3, 2, 1, 1]
        );
        assert_eq!(
            build_schedule("increasing", 10, 0).unwrap().sizes(),
            vec![1, 2, 2, 2, 3]
        );
        assert_eq!(
            build_schedule("fluctuating", 10, 0).unwrap().sizes(),
            vec![1, 3, 1, 4, 1]
        );
        assert_eq!(
            build_schedule("fluctuating", 5, 0).unwrap().sizes(),
            vec![1; 5]
        );
        assert!(build_schedule("uniform", 4, 0).is_err());
    }

    #[test]
    fn explicit_sizes_must_sum() {
        assert_eq!(
            schedule_from_sizes(&[3, 1, 4], 8, 2).unwrap().sizes(),
            vec![3, 1, 4]
        );
        assert!(schedule_from_sizes(&[3, 1], 8, 2).is_err());
        assert!(schedule_from_sizes(&[8, 0], 8, 2).is_err());
        assert!(build_schedule("nonsense", 8, 0).is_err());
    }

    #[test]
    fn seeds_change_assignment_not_sizes() {
        let a = build_schedule("B0-Inc2", 8, 1).unwrap();
        let b = build_schedule("B0-Inc2", 8, 2).unwrap();
        assert_eq!(a.sizes(), b.sizes());
        assert_ne!(a.tasks, b.tasks);
        assert_eq!(a, build_schedule("B0-Inc2", 8, 1).unwrap());
    }

    proptest! {
        #[test]
        fn schedules_partition_classes(seed in 0u64..100, total in 5usize..60, which in 0usize..7) {
            let spec = ["B0-Inc3", "B4-Inc2", "uniform", "increasing", "decreasing", "fluctuating", "random-increase"][which];
            let s = build_schedule(spec, total, seed).unwrap();
            let mut all: Vec<usize> = s.tasks.iter().flatten().copied().collect();
            prop_assert!(s.tasks.iter().all(|t| !t.is_empty()));
            all.sort();
            prop_assert_eq!(all, (0..total).collect::<Vec<_>>());
            if spec == "random-increase" {
                prop_assert!(s.sizes().iter().all(|&n| n <= (total / 3).max(1)));
            }
        }
    }
}
