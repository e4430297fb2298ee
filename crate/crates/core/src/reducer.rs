//! Associative, commutative value combiners.

use std::ops::AddAssign;

/// Folds a new value into an accumulated one.
///
/// Implementations must be associative and commutative: the engine merges
/// values in whatever order threads and nodes happen to deliver them.
pub trait Reducer<V>: Send + Sync {
    fn combine(&self, acc: &mut V, value: V);
}

impl<V, F> Reducer<V> for F
where
    F: Fn(&mut V, V) + Send + Sync,
{
    #[inline]
    fn combine(&self, acc: &mut V, value: V) {
        self(acc, value)
    }
}

/// Summation. Overflow follows the build's arithmetic overflow setting.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sum;

impl<V: AddAssign + Send + Sync> Reducer<V> for Sum {
    #[inline]
    fn combine(&self, acc: &mut V, value: V) {
        *acc += value;
    }
}

/// Maximum.
#[derive(Debug, Clone, Copy, Default)]
pub struct Max;

impl<V: Ord + Send + Sync> Reducer<V> for Max {
    #[inline]
    fn combine(&self, acc: &mut V, value: V) {
        if value > *acc {
            *acc = value;
        }
    }
}

pub fn sum() -> Sum {
    Sum
}

pub fn max() -> Max {
    Max
}
