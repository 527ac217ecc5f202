//! Split-state device memory.
//!
//! Allocations below the threshold are METADATA: backed by host memory and
//! fully functional. Larger ones are COMPUTE: bookkeeping only, writes are
//! discarded and any read is a fatal [`DeviceError::PhantomRead`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIB: u64 = 1024 * 1024;
pub const GIB: u64 = 1024 * MIB;
pub const DEFAULT_THRESHOLD: u64 = 4 * MIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BufferClass {
    Metadata,
    Compute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferHandle {
    pub id: u64,
    pub size: u64,
    pub class: BufferClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("allocation of zero bytes")]
    ZeroSize,
    #[error("out of device memory: requested {requested} bytes, {available} available")]
    OutOfDeviceMemory { requested: u64, available: u64 },
    #[error("access [{offset}, {offset}+{len}) outside buffer {id} of {size} bytes")]
    OutOfBounds { id: u64, offset: u64, len: u64, size: u64 },
    #[error("buffer {0} used after free")]
    UseAfterFree(u64),
    #[error("unknown buffer {0}")]
    UnknownBuffer(u64),
    #[error("read from unbacked compute buffer {id} ({size} bytes): control flow depends on data that was never computed")]
    PhantomRead { id: u64, size: u64 },
}

impl DeviceError {
    /// Errors after which the run cannot be trusted.
    pub fn is_fatal(&self) -> bool {
        matches!(self, DeviceError::PhantomRead { .. })
    }
}

#[derive(Debug)]
enum Slot {
    Metadata(Vec<u8>),
    Compute(u64),
    Freed,
}

#[derive(Debug)]
pub struct DeviceAllocator {
    capacity: u64,
    allocated: u64,
    threshold: u64,
    slots: HashMap<u64, Slot>,
    next_id: u64,
}

impl DeviceAllocator {
    pub fn new(capacity: u64) -> Self {
        Self::with_threshold(capacity, DEFAULT_THRESHOLD)
    }

    pub fn with_threshold(capacity: u64, threshold: u64) -> Self {
        DeviceAllocator {
            capacity,
            allocated: 0,
            threshold,
            slots: HashMap::new(),
            next_id: 1,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn allocated(&self) -> u64 {
        self.allocated
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    pub fn classify(&self, size: u64) -> BufferClass {
        if size < self.threshold {
            BufferClass::Metadata
        } else {
            BufferClass::Compute
        }
    }

    pub fn alloc(&mut self, size: u64) -> Result<BufferHandle, DeviceError> {
        if size == 0 {
            return Err(DeviceError::ZeroSize);
        }
        let available = self.capacity - self.allocated;
        if size > available {
            return Err(DeviceError::OutOfDeviceMemory {
                requested: size,
                available,
            });
        }
        let class = self.classify(size);
        let id = self.next_id;
        self.next_id += 1;
        let slot = match class {
            BufferClass::Metadata => Slot::Metadata(vec![0; size as usize]),
            BufferClass::Compute => Slot::Compute(size),
        };
        self.slots.insert(id, slot);
        self.allocated += size;
        Ok(BufferHandle { id, size, class })
    }

    fn live(&mut self, h: BufferHandle) -> Result<&mut Slot, DeviceError> {
        match self.slots.get_mut(&h.id) {
            None => Err(DeviceError::UnknownBuffer(h.id)),
            Some(Slot::Freed) => Err(DeviceError::UseAfterFree(h.id)),
            Some(slot) => Ok(slot),
        }
    }

    fn bounds(h: BufferHandle, offset: u64, len: u64) -> Result<(), DeviceError> {
        match offset.checked_add(len) {
            Some(end) if end <= h.size && offset < h.size.max(1) => Ok(()),
            _ => Err(DeviceError::OutOfBounds {
                id: h.id,
                offset,
                len,
                size: h.size,
            }),
        }
    }

    pub fn write(&mut self, h: BufferHandle, offset: u64, data: &[u8]) -> Result<(), DeviceError> {
        let slot = self.live(h)?;
        Self::bounds(h, offset, data.len() as u64)?;
        if let Slot::Metadata(bytes) = slot {
            bytes[offset as usize..offset as usize + data.len()].copy_from_slice(data);
        }
        Ok(())
    }

    pub fn read(&mut self, h: BufferHandle, offset: u64, len: u64) -> Result<Vec<u8>, DeviceError> {
        let slot = self.live(h)?;
        Self::bounds(h, offset, len)?;
        match slot {
            Slot::Metadata(bytes) => Ok(bytes[offset as usize..(offset + len) as usize].to_vec()),
            Slot::Compute(size) => Err(DeviceError::PhantomRead { id: h.id, size: *size }),
            Slot::Freed => unreachable!("checked by live()"),
        }
    }

    pub fn free(&mut self, h: BufferHandle) -> Result<(), DeviceError> {
        let slot = self.live(h)?;
        *slot = Slot::Freed;
        self.allocated -= h.size;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_examples() {
        let mut a = DeviceAllocator::new(GIB);
        assert_eq!(a.alloc(MIB).unwrap().class, BufferClass::Metadata);
        assert_eq!(a.alloc(64 * MIB).unwrap().class, BufferClass::Compute);
        assert_eq!(a.classify(4 * MIB - 1), BufferClass::Metadata);
        assert_eq!(a.classify(4 * MIB), BufferClass::Compute);
    }

    #[test]
    fn capacity_enforced() {
        let mut a = DeviceAllocator::new(GIB);
        assert_eq!(
            a.alloc(2 * GIB),
            Err(DeviceError::OutOfDeviceMemory {
                requested: 2 * GIB,
                available: GIB
            })
        );
        assert_eq!(a.alloc(0), Err(DeviceError::ZeroSize));
    }

    #[test]
    fn metadata_round_trip_and_compute_noop() {
        let mut a = DeviceAllocator::new(GIB);
        let m = a.alloc(16).unwrap();
        a.write(m, 4, b"abcd").unwrap();
        assert_eq!(a.read(m, 4, 4).unwrap(), b"abcd");
        let c = a.alloc(8 * MIB).unwrap();
        a.write(c, 0, &[1, 2, 3]).unwrap();
        let err = a.read(c, 0, 1).unwrap_err();
        assert_eq!(err, DeviceError::PhantomRead { id: c.id, size: 8 * MIB });
        assert!(err.is_fatal());
        assert!(err.to_string().contains(&format!("buffer {}", c.id)));
    }

    #[test]
    fn bounds_and_lifetime() {
        let mut a = DeviceAllocator::new(GIB);
        let m = a.alloc(16).unwrap();
        assert!(matches!(a.write(m, 16, b"x"), Err(DeviceError::OutOfBounds { .. })));
        assert!(matches!(a.read(m, 10, 7), Err(DeviceError::OutOfBounds { .. })));
        assert!(matches!(a.read(m, u64::MAX, 2), Err(DeviceError::OutOfBounds { .. })));
        let b = a.alloc(MIB * 10).unwrap();
        a.free(m).unwrap();
        a.free(b).unwrap();
        assert_eq!(a.allocated(), 0);
        assert_eq!(a.read(m, 0, 1), Err(DeviceError::UseAfterFree(m.id)));
        assert_eq!(a.free(m), Err(DeviceError::UseAfterFree(m.id)));
    }
}
