//! Flat guest memory shared by the reference interpreter and the target VM:
//! a read-only image region and a read-write stack region.

use std::sync::Arc;

/// Load address of the source image.
pub const IMAGE_BASE: u64 = 0x40_0000;
/// Lowest stack address.
pub const STACK_BASE: u64 = 0x7F_0000;
/// One past the highest stack address.
pub const STACK_END: u64 = 0x80_0000;
pub const INITIAL_RSP: u64 = 0x7F_FFF8;
/// First hostcall slot; slots are 8 bytes apart.
pub const HOSTCALL_BASE: u64 = IMAGE_BASE - 0x1000;

/// Host effects reachable by transferring control to a slot address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HostCall {
    /// Halt with RDI as the exit code.
    Exit,
    /// Append the low byte of RDI to the output.
    WriteChar,
    /// Append RDI in decimal followed by a newline.
    WriteU64,
}

impl HostCall {
    pub const ALL: [HostCall; 3] = [HostCall::Exit, HostCall::WriteChar, HostCall::WriteU64];

    pub fn number(self) -> u64 {
        match self {
            HostCall::Exit => 0,
            HostCall::WriteChar => 1,
            HostCall::WriteU64 => 2,
        }
    }

    pub fn from_number(n: u64) -> Option<HostCall> {
        HostCall::ALL.into_iter().find(|h| h.number() == n)
    }

    pub fn slot_address(self, hostcall_base: u64) -> u64 {
        hostcall_base + 8 * self.number()
    }

    pub fn at_address(addr: u64, hostcall_base: u64) -> Option<HostCall> {
        HostCall::ALL.into_iter().find(|h| h.slot_address(hostcall_base) == addr)
    }

    /// Applies the output effect of a write hostcall.
    pub fn write_output(self, arg: u64, output: &mut Vec<u8>) {
        match self {
            HostCall::Exit => {}
            HostCall::WriteChar => output.push(arg as u8),
            HostCall::WriteU64 => {
                output.extend_from_slice(arg.to_string().as_bytes());
                output.push(b'\n');
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemFault {
    /// Store into the read-only image region.
    WriteToImage,
    /// Access outside every mapped region (or straddling a boundary).
    OutOfRange,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Memory {
    image: Arc<[u8]>,
    image_base: u64,
    stack: Vec<u8>,
}

impl Memory {
    pub fn new(image: Arc<[u8]>, image_base: u64) -> Memory {
        Memory { image, image_base, stack: vec![0; (STACK_END - STACK_BASE) as usize] }
    }

    pub fn image(&self) -> &[u8] {
        &self.image
    }

    /// Replaces the image contents, keeping the stack.
    pub fn set_image(&mut self, image: Arc<[u8]>) {
        self.image = image;
    }

    pub fn image_base(&self) -> u64 {
        self.image_base
    }

    pub fn stack(&self) -> &[u8] {
        &self.stack
    }

    pub fn in_image(&self, addr: u64) -> bool {
        addr >= self.image_base && addr - self.image_base < self.image.len() as u64
    }

    fn stack_range(addr: u64, size: usize) -> Option<usize> {
        let end = addr.checked_add(size as u64)?;
        (addr >= STACK_BASE && end <= STACK_END).then(|| (addr - STACK_BASE) as usize)
    }

    /// Little-endian load of `size` bytes (1, 4 or 8), zero-extended.
    pub fn read(&self, addr: u64, size: usize) -> Result<u64, MemFault> {
        let bytes = if let Some(at) = Self::stack_range(addr, size) {
            &self.stack[at..at + size]
        } else {
            let rel = addr.wrapping_sub(self.image_base);
            let end = rel.checked_add(size as u64).ok_or(MemFault::OutOfRange)?;
            if addr < self.image_base || end > self.image.len() as u64 {
                return Err(MemFault::OutOfRange);
            }
            &self.image[rel as usize..end as usize]
        };
        let mut buf = [0u8; 8];
        buf[..size].copy_from_slice(bytes);
        Ok(u64::from_le_bytes(buf))
    }

    /// Little-endian store of the low `size` bytes of `value`.
    pub fn write(&mut self, addr: u64, size: usize, value: u64) -> Result<(), MemFault> {
        if let Some(at) = Self::stack_range(addr, size) {
            self.stack[at..at + size].copy_from_slice(&value.to_le_bytes()[..size]);
            return Ok(());
        }
        let overlaps_image = addr < self.image_base + self.image.len() as u64
            && addr.saturating_add(size as u64) > self.image_base;
        Err(if overlaps_image { MemFault::WriteToImage } else { MemFault::OutOfRange })
    }
}
