//! Bounded fan-out over independent work items using scoped threads.
//!
//! Each item is processed serially by exactly one closure call writing to its
//! own slot, so results are bitwise identical for every thread count.

/// Reads the `ANW_THREADS` environment variable; unset or invalid means 1.
pub fn env_thread_count() -> usize {
    std::env::var("ANW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Applies `f(index, &mut item)` to every item, splitting the slice across at
/// most `threads` scoped threads.
pub fn for_each_indexed<T, F>(items: &mut [T], threads: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads <= 1 {
        for (i, item) in items.iter_mut().enumerate() {
            f(i, item);
        }
        return;
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (ci, part) in items.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, item) in part.iter_mut().enumerate() {
                    f(ci * chunk + j, item);
                }
            });
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_serial_for_any_thread_count() {
        let compute = |i: usize| (i as f32).sin() * 7.25 + i as f32;
        let mut serial = vec![0.0f32; 103];
        for_each_indexed(&mut serial, 1, |i, v| *v = compute(i));
        for threads in [2, 3, 8, 64] {
            let mut par = vec![0.0f32; 103];
            for_each_indexed(&mut par, threads, |i, v| *v = compute(i));
            assert_eq!(serial, par, "threads={threads}");
        }
    }

    #[test]
    fn empty_input_is_fine() {
        let mut items: Vec<f32> = vec![];
        for_each_indexed(&mut items, 4, |_, _| unreachable!());
    }
}
