//! Parameter containers shared by layers and the model.
//!
//! Every container is generic over its leaf type: `Tensor` for stored
//! weights, [`Var`](crate::Var) once bound to a graph, and `Tensor` again for
//! gradients. Traversal order is fixed, which keeps optimizer state and
//! checkpoints aligned with parameter names.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform draw in `(−1/√fan_in, 1/√fan_in)`.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

/// Structural traversal over a tree of parameters.
pub trait ParamTree {
    type Leaf;
    type Mapped<U>: ParamTree<Leaf = U>;

    fn try_map<U>(&self, f: &mut dyn FnMut(&Self::Leaf) -> Result<U>) -> Result<Self::Mapped<U>>;
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Self::Leaf));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Self::Leaf));
}

impl<T: ParamTree> ParamTree for Option<T> {
    type Leaf = T::Leaf;
    type Mapped<U> = Option<T::Mapped<U>>;

    fn try_map<U>(&self, f: &mut dyn FnMut(&Self::Leaf) -> Result<U>) -> Result<Self::Mapped<U>> {
        self.as_ref().map(|p| p.try_map(f)).transpose()
    }
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Self::Leaf)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Self::Leaf)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

impl<T: ParamTree> ParamTree for Vec<T> {
    type Leaf = T::Leaf;
    type Mapped<U> = Vec<T::Mapped<U>>;

    fn try_map<U>(&self, f: &mut dyn FnMut(&Self::Leaf) -> Result<U>) -> Result<Self::Mapped<U>> {
        self.iter().map(|p| p.try_map(f)).collect()
    }
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Self::Leaf)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Self::Leaf)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// A single named leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Leaf<T>(pub T);

impl<T> ParamTree for Leaf<T> {
    type Leaf = T;
    type Mapped<U> = Leaf<U>;

    fn try_map<U>(&self, f: &mut dyn FnMut(&T) -> Result<U>) -> Result<Leaf<U>> {
        Ok(Leaf(f(&self.0)?))
    }
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(prefix, &self.0);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(prefix, &mut self.0);
    }
}

/// Declares a parameter struct and its [`ParamTree`] impl field by field.
macro_rules! param_struct {
    (
        $(#[$meta:meta])*
        pub struct $name:ident<T> { $( $(#[$fmeta:meta])* pub $field:ident : $fty:ty ),* $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> { $( $(#[$fmeta])* pub $field: $fty ),* }

        impl<T> $crate::params::ParamTree for $name<T> {
            type Leaf = T;
            type Mapped<U> = $name<U>;

            fn try_map<U>(
                &self,
                f: &mut dyn FnMut(&T) -> $crate::error::Result<U>,
            ) -> $crate::error::Result<$name<U>> {
                Ok($name { $( $field: $crate::params::ParamTree::try_map(&self.$field, f)? ),* })
            }

            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
                $( $crate::params::ParamTree::visit(&self.$field, &$crate::params::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $( $crate::params::ParamTree::visit_mut(&mut self.$field, &$crate::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use param_struct;

/// Flattens a tree into `(name, leaf)` pairs in traversal order.
pub fn named<P>(tree: &P) -> Vec<(String, P::Leaf)>
where
    P: ParamTree,
    P::Leaf: Clone,
{
    let mut out = Vec::new();
    tree.visit("", &mut |name, leaf| {
        out.push((name.to_string(), leaf.clone()))
    });
    out
}

/// Total number of scalar parameters.
pub fn count<P: ParamTree<Leaf = Tensor>>(tree: &P) -> usize {
    let mut n = 0;
    tree.visit("", &mut |_, t| n += t.len());
    n
}
