//! Named parameter groups.
//!
//! Every learnable struct is generic over its leaf type: `Tensor` for stored
//! weights, [`Var`](crate::Var) once bound to a tape, and `Tensor` again for
//! gradients. The visiting order is the declaration order and is what
//! checkpoints, optimisers, and gradient checks rely on.

use crate::tensor::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Declares a flat parameter group with `map_named`, `for_each_named`, and
/// `for_each_named_mut`.
macro_rules! param_group {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[$fmeta:meta])* $field:ident ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = $crate::tensor::Tensor> {
            $( $(#[$fmeta])* pub $field: T, )*
        }

        impl<T> $name<T> {
            pub fn map_named<U>(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &T) -> U,
            ) -> $name<U> {
                $name {
                    $( $field: f(&$crate::params::join(prefix, stringify!($field)), &self.$field), )*
                }
            }

            pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
                $( f(&$crate::params::join(prefix, stringify!($field)), &self.$field); )*
            }

            pub fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $( f(&$crate::params::join(prefix, stringify!($field)), &mut self.$field); )*
            }
        }
    };
}

pub(crate) use param_group;

/// A set of named tensors that can be visited and perturbed in a stable order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

/// Plain ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors(pub Vec<(String, Tensor)>);

impl NamedTensors {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

impl Params for NamedTensors {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, t) in &self.0 {
            f(name, t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, t) in &mut self.0 {
            f(name, t);
        }
    }
}
