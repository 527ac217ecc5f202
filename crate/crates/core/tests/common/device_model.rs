//! Shadow model for the split-state allocator.

use std::collections::HashMap;

use timewarp::device::{BufferClass, BufferHandle, DeviceAllocator, DeviceError};

#[derive(Debug, Clone)]
pub enum Op {
    Alloc(u64),
    /// Index into the handles allocated so far (modulo their count).
    Write { buf: usize, offset: u64, data: Vec<u8> },
    Read { buf: usize, offset: u64, len: u64 },
    Free(usize),
}

#[derive(Default)]
struct Shadow {
    live: HashMap<u64, Option<Vec<u8>>>,
    freed: Vec<u64>,
    allocated: u64,
}

/// Applies `ops` to a fresh allocator and to the shadow model; returns the
/// first disagreement. Checks classification, accounting, contents, and
/// that every compute read fails with PhantomRead.
pub fn check(ops: &[Op], capacity: u64, threshold: u64) -> Result<usize, String> {
    let mut dev = DeviceAllocator::with_threshold(capacity, threshold);
    let mut shadow = Shadow::default();
    let mut handles: Vec<BufferHandle> = Vec::new();
    let mut phantom_reads = 0;
    for (i, op) in ops.iter().enumerate() {
        if handles.is_empty() && !matches!(op, Op::Alloc(_)) {
            continue;
        }
        let fail = |what: String| Err(format!("op {i} {op:?}: {what}"));
        match op {
            Op::Alloc(size) => {
                let got = dev.alloc(*size);
                let fits = *size > 0 && *size <= capacity - shadow.allocated;
                match got {
                    Ok(h) => {
                        if !fits {
                            return fail("allocation should have failed".into());
                        }
                        let want = if *size < threshold { BufferClass::Metadata } else { BufferClass::Compute };
                        if h.class != want {
                            return fail(format!("classified {:?}", h.class));
                        }
                        shadow
                            .live
                            .insert(h.id, (want == BufferClass::Metadata).then(|| vec![0; *size as usize]));
                        shadow.allocated += size;
                        handles.push(h);
                    }
                    Err(DeviceError::ZeroSize) if *size == 0 => {}
                    Err(DeviceError::OutOfDeviceMemory { .. }) if !fits && *size > 0 => {}
                    Err(e) => return fail(format!("unexpected {e}")),
                }
            }
            Op::Write { buf, offset, data } => {
                let h = handles[buf % handles.len()];
                let r = dev.write(h, *offset, data);
                match shadow.live.get_mut(&h.id) {
                    None => {
                        if r != Err(DeviceError::UseAfterFree(h.id)) {
                            return fail(format!("expected use-after-free, got {r:?}"));
                        }
                    }
                    Some(backing) => {
                        let in_bounds = *offset < h.size && offset + data.len() as u64 <= h.size;
                        match (in_bounds, &r) {
                            (true, Ok(())) => {
                                if let Some(bytes) = backing {
                                    bytes[*offset as usize..*offset as usize + data.len()].copy_from_slice(data);
                                }
                            }
                            (false, Err(DeviceError::OutOfBounds { .. })) => {}
                            _ => return fail(format!("in_bounds={in_bounds}, got {r:?}")),
                        }
                    }
                }
            }
            Op::Read { buf, offset, len } => {
                let h = handles[buf % handles.len()];
                let r = dev.read(h, *offset, *len);
                match shadow.live.get(&h.id) {
                    None => {
                        if r != Err(DeviceError::UseAfterFree(h.id)) {
                            return fail(format!("expected use-after-free, got {r:?}"));
                        }
                    }
                    Some(backing) => {
                        let in_bounds = *offset < h.size && offset + len <= h.size;
                        match (in_bounds, backing, &r) {
                            (false, _, Err(DeviceError::OutOfBounds { .. })) => {}
                            (true, Some(bytes), Ok(got)) => {
                                if got[..] != bytes[*offset as usize..(*offset + *len) as usize] {
                                    return fail("contents differ".into());
                                }
                            }
                            (true, None, Err(e @ DeviceError::PhantomRead { .. })) if e.is_fatal() => phantom_reads += 1,
                            _ => return fail(format!("in_bounds={in_bounds}, got {r:?}")),
                        }
                    }
                }
            }
            Op::Free(buf) => {
                let h = handles[buf % handles.len()];
                let r = dev.free(h);
                if shadow.live.remove(&h.id).is_some() {
                    if r.is_err() {
                        return fail(format!("{r:?}"));
                    }
                    shadow.allocated -= h.size;
                    shadow.freed.push(h.id);
                } else if r != Err(DeviceError::UseAfterFree(h.id)) {
                    return fail(format!("double free gave {r:?}"));
                }
            }
        }
        if dev.allocated() != shadow.allocated {
            return fail(format!("allocated {} vs shadow {}", dev.allocated(), shadow.allocated));
        }
    }
    Ok(phantom_reads)
}

/// Sizes clustered around the threshold so both sides of it get exercised.
pub fn size_near(threshold: u64, pick: u64, spread: u64) -> u64 {
    match pick % 4 {
        0 => pick % 64,
        1 => threshold.saturating_sub(1 + pick % spread.max(1)),
        2 => threshold + pick % spread.max(1),
        _ => threshold - 1 + pick % 3,
    }
}

pub fn random_ops(seed: u64, n: usize, threshold: u64) -> Vec<Op> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| match rng.random_range(0..20) {
            0..=4 => Op::Alloc(size_near(threshold, rng.random(), 4096)),
            5..=8 => Op::Write {
                buf: rng.random_range(0..1000),
                offset: rng.random_range(0..128),
                data: (0..rng.random_range(0..16)).map(|_| rng.random()).collect(),
            },
            9..=15 => Op::Read {
                buf: rng.random_range(0..1000),
                offset: rng.random_range(0..128),
                len: rng.random_range(0..16),
            },
            _ => Op::Free(rng.random_range(0..1000)),
        })
        .collect()
}
