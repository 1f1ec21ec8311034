//! Name-keyed registries of strategy objects selected at runtime.

use crate::error::{Error, Result};

pub struct Registry<T: ?Sized> {
    entries: Vec<(&'static str, Box<T>)>,
}

impl<T: ?Sized> Default for Registry<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: ?Sized> Registry<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Later registrations under the same name replace earlier ones.
    pub fn register(&mut self, name: &'static str, item: Box<T>) {
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = item;
        } else {
            self.entries.push((name, item));
        }
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, b)| b.as_ref()).ok_or_else(|| {
            Error::UnknownStrategy { name: name.to_string(), available: self.names().join(", ") }
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Named {
        fn id(&self) -> u32;
    }
    struct A(u32);
    impl Named for A {
        fn id(&self) -> u32 {
            self.0
        }
    }

    #[test]
    fn lookup_replace_and_unknown() {
        let mut r: Registry<dyn Named> = Registry::new();
        r.register("a", Box::new(A(1)));
        r.register("b", Box::new(A(2)));
        r.register("a", Box::new(A(3)));
        assert_eq!(r.get("a").unwrap().id(), 3);
        assert_eq!(r.names(), vec!["a", "b"]);
        match r.get("zzz") {
            Err(Error::UnknownStrategy { available, .. }) => assert_eq!(available, "a, b"),
            _ => panic!("expected an unknown-strategy error"),
        }
    }
}
