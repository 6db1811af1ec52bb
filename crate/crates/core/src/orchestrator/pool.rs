use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

/// Applies `task` to every item with at most `limit` tasks running at once
/// and returns the results in item order, whatever order they finished in.
///
/// With `stop_on_error`, workers take no new item once any task failed;
/// items never started are `None`. Items are handed out in index order, so
/// every item before a failing one has been started and completed.
pub(crate) fn map_bounded<T, R, E, F>(
    items: &[T],
    limit: usize,
    stop_on_error: bool,
    task: F,
) -> Vec<Option<Result<R, E>>>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync,
{
    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        let mut out = Vec::with_capacity(items.len());
        let mut stopped = false;
        for item in items {
            if stopped {
                out.push(None);
                continue;
            }
            let result = task(item);
            stopped = stop_on_error && result.is_err();
            out.push(Some(result));
        }
        return out;
    }

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<R, E>>>> =
        Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let result = task(item);
                if stop_on_error && result.is_err() {
                    stop.store(true, Ordering::SeqCst);
                }
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });
    slots.into_inner().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn order_is_by_index_for_any_limit() {
        let items: Vec<u64> = (0..40).collect();
        for limit in [1, 2, 7, 64] {
            let out = map_bounded(&items, limit, false, |n| {
                std::thread::sleep(Duration::from_micros((40 - n) * 20));
                Ok::<_, ()>(n * n)
            });
            let values: Vec<u64> = out.into_iter().map(|r| r.unwrap().unwrap()).collect();
            assert_eq!(values, items.iter().map(|n| n * n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn bounded_in_flight() {
        let inside = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let items = vec![(); 30];
        map_bounded(&items, 3, false, |_| {
            let now = inside.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            inside.fetch_sub(1, Ordering::SeqCst);
            Ok::<_, ()>(())
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }

    #[test]
    fn stop_on_error_keeps_earlier_results() {
        let items: Vec<usize> = (0..20).collect();
        for limit in [1, 4] {
            let out = map_bounded(&items, limit, true, |&n| if n == 5 { Err(n) } else { Ok(n) });
            assert!(out[..5].iter().all(|r| matches!(r, Some(Ok(_)))));
            assert_eq!(out[5], Some(Err(5)));
            let first_err = out.iter().flatten().position(|r| r.is_err());
            assert_eq!(first_err, Some(5));
        }
        let empty: Vec<Option<Result<(), ()>>> = map_bounded(&[] as &[u8], 4, true, |_| Ok(()));
        assert!(empty.is_empty());
    }
}
