//! Order-preserving fan-out over scoped threads.

/// Computes `f(0..n)` on up to `threads` workers in contiguous chunks and
/// returns results in index order, so output never depends on scheduling.
pub fn map_indexed<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        for (c, part) in slots.chunks_mut(chunk).enumerate() {
            s.spawn(move || {
                for (k, slot) in part.iter_mut().enumerate() {
                    *slot = Some(f(c * chunk + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot is filled")).collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn order_is_kept_for_any_thread_count() {
        for threads in [1, 2, 3, 8, 100] {
            assert_eq!(
                super::map_indexed(17, threads, |i| i * i),
                (0..17).map(|i| i * i).collect::<Vec<_>>()
            );
        }
        assert!(super::map_indexed(0, 4, |i| i).is_empty());
    }
}
