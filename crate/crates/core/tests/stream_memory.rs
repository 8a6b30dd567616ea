//! Peak heap use of cached streaming, measured with a counting allocator.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use leanvae::model::{Model, ModelConfig};
use leanvae::tiling::{split_rows, stream_decode_chunk, stream_encode_chunk, StreamState};
use leanvae::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn grow(n: usize) {
    let now = CURRENT.fetch_add(n, Ordering::SeqCst) + n;
    PEAK.fetch_max(now, Ordering::SeqCst);
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size > layout.size() {
                grow(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::SeqCst);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Payload of the cached slices plus a fixed allowance per slot for its
/// bookkeeping (slot vector, shape, reference count).
fn cache_bytes(state: &StreamState<f32>) -> usize {
    let payload: usize = state.caches.slots().iter().flatten().map(|t| t.numel() * std::mem::size_of::<f32>()).sum();
    payload + 128 * state.caches.len()
}

/// Bytes allocated by `f` above the level at entry, at its peak.
fn peak_of<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let out = f();
    (out, PEAK.load(Ordering::SeqCst) - base)
}

// Single test in this binary so no other test allocates concurrently.
#[test]
fn streaming_peak_is_bounded_by_the_largest_chunk() {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().ok();
    let model = Model::<f32>::new(ModelConfig { d1: 16, d2: 16, width: 32, d: 8, ff_expansion: 2, ..ModelConfig::default() }).unwrap();
    let frames = 65;
    let x = Tensor::<f32>::uniform(&[frames, 32, 32, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let plan = [9, 8, 8, 8, 8, 8, 8, 8];
    let chunks = split_rows(&x, &plan).unwrap();

    let (z_full, full_peak) = peak_of(|| model.encode(&x).unwrap().z);
    let (_, chunk_peak) = peak_of(|| model.encode(&chunks[0]).unwrap().z);

    let mut state = StreamState::new(&model);
    let mut rows = Vec::new();
    let mut stream_peak = 0;
    for c in &chunks {
        let (z, p) = peak_of(|| stream_encode_chunk(&model, &mut state, c).unwrap());
        stream_peak = stream_peak.max(p);
        rows.push(z);
    }
    let z = Tensor::concat_axis0(&rows.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(z, z_full);
    // per-chunk work is that of a standalone pass on the largest chunk plus
    // the persistent cached slices; the full pass grows with clip length
    let bound = chunk_peak + cache_bytes(&state);
    assert!(stream_peak <= bound, "stream {stream_peak} vs bound {bound}");
    assert!(full_peak > 3 * stream_peak, "full {full_peak} vs stream {stream_peak}");

    let latent_chunks = split_rows(&z_full, &[3, 2, 2, 2, 2, 2, 2, 2]).unwrap();
    let (_, full_dec_peak) = peak_of(|| model.decode(&z_full).unwrap());
    let (_, first_dec_peak) = peak_of(|| model.decode(&latent_chunks[0]).unwrap());
    let mut state = StreamState::new(&model);
    let mut dec_peak = 0;
    for c in &latent_chunks {
        let (_, p) = peak_of(|| stream_decode_chunk(&model, &mut state, c).unwrap());
        dec_peak = dec_peak.max(p);
    }
    let bound = first_dec_peak + cache_bytes(&state);
    assert!(dec_peak <= bound, "stream {dec_peak} vs bound {bound}");
    assert!(full_dec_peak > 3 * dec_peak, "full {full_dec_peak} vs stream {dec_peak}");
}
