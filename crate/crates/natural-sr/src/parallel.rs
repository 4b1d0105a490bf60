//! Deterministic data-parallel helper.
//!
//! Work is split into fixed chunks of the output buffer and every chunk is
//! computed by exactly one thread with a fixed inner iteration order, so
//! results are bitwise identical for any thread count. `threads == 1` runs
//! inline with no spawning.

/// Resolves a requested thread count; 0 means "use what the host offers".
pub fn effective_threads(requested: usize) -> usize {
    if requested == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        requested
    }
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk_len` slices of
/// `out`, distributing chunks round-robin over `threads` workers.
pub fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, threads: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    let n_chunks = out.len().div_ceil(chunk_len);
    let threads = threads.max(1).min(n_chunks.max(1));
    if threads <= 1 {
        for (i, ch) in out.chunks_mut(chunk_len).enumerate() {
            f(i, ch);
        }
        return;
    }
    let mut buckets: Vec<Vec<(usize, &mut [f64])>> = (0..threads).map(|_| Vec::new()).collect();
    for (i, ch) in out.chunks_mut(chunk_len).enumerate() {
        buckets[i % threads].push((i, ch));
    }
    let f = &f;
    std::thread::scope(|s| {
        for bucket in buckets {
            s.spawn(move || {
                for (i, ch) in bucket {
                    f(i, ch);
                }
            });
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_count_does_not_change_results() {
        let fill = |i: usize, ch: &mut [f64]| {
            for (j, v) in ch.iter_mut().enumerate() {
                *v = (i * 1000 + j) as f64 * 0.5;
            }
        };
        let mut a = vec![0.0; 103];
        let mut b = vec![0.0; 103];
        for_each_chunk(&mut a, 7, 1, fill);
        for_each_chunk(&mut b, 7, 4, fill);
        assert_eq!(a, b);
    }

    #[test]
    fn covers_every_element() {
        let mut a = vec![0.0; 64];
        for_each_chunk(&mut a, 16, 3, |_, ch| {
            for v in ch.iter_mut() {
                *v += 1.0;
            }
        });
        assert!(a.iter().all(|&v| v == 1.0));
    }
}
