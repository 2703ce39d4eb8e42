//! Deterministic sweep execution. Sweep items form a fixed list; a small
//! worker pool claims indices from a shared counter and results are merged
//! back in item order, so output bytes never depend on the worker count or
//! on scheduling. The pool size comes from `EULER_RESNET_THREADS`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

pub const THREADS_ENV: &str = "EULER_RESNET_THREADS";

/// Reads the worker-pool size from the environment, defaulting to 1.
pub fn thread_count() -> Result<usize, String> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(format!("{THREADS_ENV} must be a positive integer"))
        }
        Ok(raw) => parse_thread_value(&raw),
    }
}

fn parse_thread_value(raw: &str) -> Result<usize, String> {
    match raw.trim().parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")),
    }
}

/// Maps `f` over `items` with up to `threads` workers and returns results in
/// item order. Panics in workers propagate out of the scope.
pub fn parallel_map<I, T, F>(items: &[I], threads: usize, f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(usize, &I) -> T + Sync,
{
    let threads = threads.min(items.len()).max(1);
    if threads == 1 {
        return items.iter().enumerate().map(|(i, item)| f(i, item)).collect();
    }
    let next = AtomicUsize::new(0);
    let (sender, receiver) = mpsc::channel::<(usize, T)>();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            let sender = sender.clone();
            let next = &next;
            let f = &f;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                if sender.send((i, f(i, &items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(sender);
        let mut slots: Vec<Option<T>> = (0..items.len()).map(|_| None).collect();
        for (i, value) in receiver {
            slots[i] = Some(value);
        }
        slots
            .into_iter()
            .map(|slot| slot.expect("every item index was claimed exactly once"))
            .collect()
    })
}

/// Median with the even-count rule: mean of the two middle values after
/// sorting by total order.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Population standard deviation (divides by the count, not count minus 1).
pub fn population_std(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "standard deviation of an empty slice");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_preserves_item_order() {
        let items: Vec<usize> = (0..57).collect();
        let expected: Vec<usize> = items.iter().map(|i| i * i).collect();
        for threads in [1, 2, 3, 8] {
            let got = parallel_map(&items, threads, |_, &i| i * i);
            assert_eq!(got, expected, "threads = {threads}");
        }
    }

    #[test]
    fn parallel_map_passes_the_item_index() {
        let items = ["a", "b", "c"];
        let got = parallel_map(&items, 2, |i, s| format!("{i}{s}"));
        assert_eq!(got, vec!["0a", "1b", "2c"]);
    }

    #[test]
    fn parallel_map_handles_empty_and_single_item_lists() {
        let empty: Vec<u32> = Vec::new();
        assert!(parallel_map(&empty, 4, |_, &x| x).is_empty());
        assert_eq!(parallel_map(&[7u32], 4, |_, &x| x + 1), vec![8]);
    }

    #[test]
    fn median_follows_the_even_count_rule() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[1.0, 9.0]), 5.0);
        assert_eq!(median(&[9.0, 1.0, 5.0]), 5.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn population_std_matches_hand_values() {
        assert_eq!(population_std(&[2.0, 2.0, 2.0]), 0.0);
        assert!((population_std(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
        assert!((population_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn thread_values_parse_with_trimming_and_reject_garbage() {
        assert_eq!(parse_thread_value("1").unwrap(), 1);
        assert_eq!(parse_thread_value(" 8 ").unwrap(), 8);
        assert!(parse_thread_value("0").is_err());
        assert!(parse_thread_value("-2").is_err());
        assert!(parse_thread_value("two").is_err());
        assert!(parse_thread_value("").is_err());
    }
}
