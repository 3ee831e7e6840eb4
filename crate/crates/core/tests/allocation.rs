use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};

use glassopt::alice::{topography_update, AliceConfig, TopographyState, Workspace};
use glassopt::objective::Quadratic;
use glassopt::rng::seeded;

struct Counting;

static COUNT: AtomicUsize = AtomicUsize::new(0);
static BYTES: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static ARMED: Cell<bool> = const { Cell::new(false) };
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if ARMED.with(Cell::get) {
            COUNT.fetch_add(1, Ordering::SeqCst);
            BYTES.fetch_add(layout.size(), Ordering::SeqCst);
        }
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

#[test]
fn topography_update_allocates_one_temporary() {
    let d = 64;
    let diag: Vec<f64> = (0..d).map(|i| 0.5 + i as f64 / 16.0).collect();
    let mut h = vec![0.0; d * d];
    for i in 0..d {
        h[i * d + i] = diag[i];
    }
    let mut obj = Quadratic::new(d, h);
    let cfg = AliceConfig::default();
    let mut state = TopographyState::new(vec![0.3; d]);
    let mut ws = Workspace::new(d);
    let mut rng = seeded(5);

    for _ in 0..3 {
        COUNT.store(0, Ordering::SeqCst);
        BYTES.store(0, Ordering::SeqCst);
        ARMED.with(|a| a.set(true));
        topography_update(&mut state, &mut obj, &cfg, &mut rng, &mut ws).unwrap();
        ARMED.with(|a| a.set(false));
        assert_eq!(COUNT.load(Ordering::SeqCst), 1);
        assert_eq!(BYTES.load(Ordering::SeqCst), d * std::mem::size_of::<f64>());
    }
    assert!(state.is_valid());
}
