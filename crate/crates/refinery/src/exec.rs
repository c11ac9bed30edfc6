//! Retry policy and bounded fan-out shared by every stage.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use crate::error::BackendError;

/// Total attempts per item, first try included.
pub const MAX_ATTEMPTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    /// Delay before the first retry after a backend failure; doubled each time.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: MAX_ATTEMPTS,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Why one attempt failed.
#[derive(Debug, Clone, PartialEq)]
pub enum AttemptError {
    /// The call itself failed; retried after a backoff.
    Backend(BackendError),
    /// The reply could not be used; retried at once with a format reminder.
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exhausted {
    pub attempts: usize,
    pub message: String,
}

impl RetryPolicy {
    /// Runs `attempt(k, previous_format_error)` until it succeeds or the
    /// attempt budget (capped at [`MAX_ATTEMPTS`]) is spent.
    pub fn run<T>(
        &self,
        mut attempt: impl FnMut(usize, Option<&str>) -> Result<T, AttemptError>,
    ) -> Result<(T, usize), Exhausted> {
        let budget = self.max_attempts.clamp(1, MAX_ATTEMPTS);
        let mut delay = self.base_delay;
        let mut format_error: Option<String> = None;
        let mut last = String::new();
        for k in 1..=budget {
            match attempt(k, format_error.as_deref()) {
                Ok(v) => return Ok((v, k)),
                Err(AttemptError::Backend(e)) => {
                    last = e.to_string();
                    if k < budget && !delay.is_zero() {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
                Err(AttemptError::Format(m)) => {
                    last = format!("unusable reply: {m}");
                    format_error = Some(m);
                }
            }
        }
        Err(Exhausted {
            attempts: budget,
            message: last,
        })
    }
}

/// Applies `f` to every item with at most `limit` calls in flight. Results
/// keep the input order.
pub fn bounded_map<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}
