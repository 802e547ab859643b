//! Reference-counted object table.
//!
//! Objects start with a count of one (the creator's handle). Parents hold one reference
//! on each child they list, so a child outlives the application's handle for as long as
//! some parent still refers to it. Reaching zero destroys the object and drops the
//! references it held on its children.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Handle {
    index: u32,
    generation: u32,
}

impl Handle {
    pub fn index(&self) -> u32 {
        self.index
    }
}

impl std::fmt::Display for Handle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}.{}", self.index, self.generation)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RefError {
    #[error("object {0} has already been released")]
    Dead(Handle),
    #[error("object {child} is not a child of {parent}")]
    NotAChild { parent: Handle, child: Handle },
}

struct Slot<T> {
    generation: u32,
    count: u32,
    value: Option<T>,
    children: Vec<Handle>,
}

pub struct RefTable<T> {
    slots: Vec<Slot<T>>,
    free: Vec<u32>,
}

impl<T> Default for RefTable<T> {
    fn default() -> Self {
        RefTable {
            slots: Vec::new(),
            free: Vec::new(),
        }
    }
}

impl<T> RefTable<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&mut self, value: T) -> Handle {
        if let Some(index) = self.free.pop() {
            let slot = &mut self.slots[index as usize];
            slot.generation += 1;
            slot.count = 1;
            slot.value = Some(value);
            Handle {
                index,
                generation: slot.generation,
            }
        } else {
            let index = self.slots.len() as u32;
            self.slots.push(Slot {
                generation: 0,
                count: 1,
                value: Some(value),
                children: Vec::new(),
            });
            Handle {
                index,
                generation: 0,
            }
        }
    }

    fn slot(&self, h: Handle) -> Result<&Slot<T>, RefError> {
        match self.slots.get(h.index as usize) {
            Some(s) if s.generation == h.generation && s.value.is_some() => Ok(s),
            _ => Err(RefError::Dead(h)),
        }
    }

    fn slot_mut(&mut self, h: Handle) -> Result<&mut Slot<T>, RefError> {
        match self.slots.get_mut(h.index as usize) {
            Some(s) if s.generation == h.generation && s.value.is_some() => Ok(s),
            _ => Err(RefError::Dead(h)),
        }
    }

    pub fn is_alive(&self, h: Handle) -> bool {
        self.slot(h).is_ok()
    }

    pub fn count(&self, h: Handle) -> Result<u32, RefError> {
        self.slot(h).map(|s| s.count)
    }

    pub fn get(&self, h: Handle) -> Result<&T, RefError> {
        self.slot(h).map(|s| s.value.as_ref().expect("live slot"))
    }

    pub fn get_mut(&mut self, h: Handle) -> Result<&mut T, RefError> {
        self.slot_mut(h)
            .map(|s| s.value.as_mut().expect("live slot"))
    }

    pub fn retain(&mut self, h: Handle) -> Result<u32, RefError> {
        let s = self.slot_mut(h)?;
        s.count += 1;
        Ok(s.count)
    }

    /// Drops one reference. Returns the remaining count; zero means destroyed.
    pub fn release(&mut self, h: Handle) -> Result<u32, RefError> {
        let s = self.slot_mut(h)?;
        s.count -= 1;
        if s.count > 0 {
            return Ok(s.count);
        }
        let mut pending = vec![h];
        while let Some(dead) = pending.pop() {
            let slot = &mut self.slots[dead.index as usize];
            slot.value = None;
            let children = std::mem::take(&mut slot.children);
            self.free.push(dead.index);
            for child in children {
                // children are alive while a parent holds them
                let c = &mut self.slots[child.index as usize];
                c.count -= 1;
                if c.count == 0 {
                    pending.push(child);
                }
            }
        }
        Ok(0)
    }

    /// Records that `parent` holds a reference on `child`.
    pub fn add_child(&mut self, parent: Handle, child: Handle) -> Result<(), RefError> {
        self.slot(parent)?;
        self.retain(child)?;
        self.slot_mut(parent)?.children.push(child);
        Ok(())
    }

    pub fn remove_child(&mut self, parent: Handle, child: Handle) -> Result<(), RefError> {
        let p = self.slot_mut(parent)?;
        let pos = p
            .children
            .iter()
            .position(|&c| c == child)
            .ok_or(RefError::NotAChild { parent, child })?;
        p.children.remove(pos);
        self.release(child)?;
        Ok(())
    }

    pub fn children(&self, h: Handle) -> Result<&[Handle], RefError> {
        self.slot(h).map(|s| s.children.as_slice())
    }

    pub fn live_count(&self) -> usize {
        self.slots.iter().filter(|s| s.value.is_some()).count()
    }
}
