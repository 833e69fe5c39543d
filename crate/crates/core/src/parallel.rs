//! A process-wide worker count and an ordered chunked map over scoped threads.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Sets the number of evaluation workers (at least one).
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Number of available cores, falling back to one.
pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Applies `f` to consecutive chunks of `items` and returns the results in
/// chunk order. Work is spread over [`threads`] workers; the result does not
/// depend on the worker count.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> Result<R> + Sync,
{
    let chunks: Vec<&[T]> = items.chunks(chunk.max(1)).collect();
    let workers = threads().min(chunks.len()).max(1);
    if workers == 1 {
        return chunks.into_iter().map(&f).collect();
    }
    let f = &f;
    let chunks = &chunks;
    let mut slots: Vec<Option<Result<R>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..chunks.len())
                        .step_by(workers)
                        .map(|i| (i, f(chunks[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every chunk visited")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let items: Vec<u32> = (0..103).collect();
        let one = map_chunks(&items, 10, |c| Ok(c.iter().sum::<u32>())).unwrap();
        set_threads(4);
        let four = map_chunks(&items, 10, |c| Ok(c.iter().sum::<u32>())).unwrap();
        set_threads(1);
        assert_eq!(one, four);
        assert_eq!(one.len(), 11);
    }
}
