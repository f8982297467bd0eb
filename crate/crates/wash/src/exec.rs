use wash_core::population::Executor;

/// Splits the workers into contiguous chunks, one scoped thread per chunk.
///
/// Each model is still updated by exactly one closure call, so results do
/// not depend on the thread count.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    threads: usize,
}

impl Threaded {
    pub fn new(threads: usize) -> Self {
        Self {
            threads: threads.max(1),
        }
    }
}

impl Executor for Threaded {
    fn for_each_worker<T: Send, F: Fn(usize, &mut T) + Sync>(&self, items: &mut [T], f: F) {
        if self.threads == 1 || items.len() <= 1 {
            for (i, item) in items.iter_mut().enumerate() {
                f(i, item);
            }
            return;
        }
        let chunk = items.len().div_ceil(self.threads);
        let f = &f;
        std::thread::scope(|s| {
            for (c, part) in items.chunks_mut(chunk).enumerate() {
                s.spawn(move || {
                    for (j, item) in part.iter_mut().enumerate() {
                        f(c * chunk + j, item);
                    }
                });
            }
        });
    }
}
