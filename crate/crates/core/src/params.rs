//! Named parameter groups.
//!
//! Every learnable group is a struct generic over its leaf type, so the same
//! layout holds plain tensors, tape variables, gradients or moment buffers.

use crate::numcore::{Adam, Tape, Tensor, Var};

/// Declares a parameter group whose fields carry stable checkpoint keys.
macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident => $key:literal),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = $crate::numcore::Tensor> {
            $(pub $field: T),*
        }

        impl<T> $name<T> {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn map<U>(&self, mut f: impl FnMut(&'static str, &T) -> U) -> $name<U> {
                $name { $($field: f($key, &self.$field)),* }
            }

            pub fn try_map<U, E>(
                &self,
                mut f: impl FnMut(&'static str, &T) -> Result<U, E>,
            ) -> Result<$name<U>, E> {
                Ok($name { $($field: f($key, &self.$field)?),* })
            }

            pub fn for_each(&self, mut f: impl FnMut(&'static str, &T)) {
                $(f($key, &self.$field);)*
            }

            pub fn for_each_mut(&mut self, mut f: impl FnMut(&'static str, &mut T)) {
                $(f($key, &mut self.$field);)*
            }

            pub fn fields_mut(&mut self) -> Vec<&mut T> {
                vec![$(&mut self.$field),*]
            }
        }

        impl<T> $crate::params::ParamTree<T> for $name<T> {
            fn visit(&self, f: &mut dyn FnMut(String, &T)) {
                self.for_each(|k, t| f(k.to_string(), t));
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
                self.for_each_mut(|k, t| f(k.to_string(), t));
            }

            fn leaves_mut(&mut self) -> Vec<&mut T> {
                self.fields_mut()
            }
        }

        impl $name<()> {
            /// Shape-free layout, used as a template for `map`.
            pub fn layout() -> Self {
                $name { $($field: ()),* }
            }
        }
    };
}
pub(crate) use param_struct;

/// Flat, ordered view over any parameter collection.
pub trait ParamTree<T> {
    fn visit(&self, f: &mut dyn FnMut(String, &T));
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T));
    /// Mutable leaves in visit order.
    fn leaves_mut(&mut self) -> Vec<&mut T>;
}

/// Runs one optimizer update over every leaf of `params`.
pub fn adam_update<P: ParamTree<Tensor>>(
    adam: &mut Adam,
    params: &mut P,
    grads: &[Tensor],
) -> Result<(), crate::Error> {
    let mut leaves = params.leaves_mut();
    adam.step(&mut leaves, grads)?;
    Ok(())
}

/// Rounds every leaf to the nearest 32-bit float.
pub fn round_to_f32<P: ParamTree<Tensor>>(params: &mut P) {
    params.leaves_mut().into_iter().for_each(Tensor::round_to_f32);
}

/// Visits `inner` with every name prefixed by `prefix`.
pub fn visit_prefixed<T, P: ParamTree<T>>(inner: &P, prefix: &str, f: &mut dyn FnMut(String, &T)) {
    inner.visit(&mut |k, t| f(format!("{prefix}{k}"), t));
}

pub fn visit_prefixed_mut<T, P: ParamTree<T>>(inner: &mut P, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
    inner.visit_mut(&mut |k, t| f(format!("{prefix}{k}"), t));
}

pub fn named_tensors<P: ParamTree<Tensor>>(params: &P) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    params.visit(&mut |name, t| out.push((name, t.clone())));
    out
}

pub fn param_count<P: ParamTree<Tensor>>(params: &P) -> usize {
    let mut n = 0;
    params.visit(&mut |_, t| n += t.len());
    n
}

/// Gradients of bound variables in visit order (zeros where none arrived).
pub fn collect_grads<'t, P: ParamTree<Var<'t>>>(vars: &P) -> Vec<Tensor> {
    let mut out = Vec::new();
    vars.visit(&mut |_, v| out.push(v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()))));
    out
}

pub fn bind_param<'t>(tape: &'t Tape) -> impl FnMut(&'static str, &Tensor) -> Var<'t> + 't {
    move |_, t| tape.param(t.clone())
}

pub fn bind_constant<'t>(tape: &'t Tape) -> impl FnMut(&'static str, &Tensor) -> Var<'t> + 't {
    move |_, t| tape.constant(t.clone())
}

/// Looks up `name` in a list of named tensors and checks its shape.
pub fn take_named(named: &[(String, Tensor)], name: &str, shape: &[usize]) -> Result<Tensor, crate::Error> {
    let t = named
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| crate::Error::Checkpoint(format!("missing parameter {name}")))?;
    if t.shape() != shape {
        return Err(crate::Error::Checkpoint(format!(
            "parameter {name} has shape {:?}, config expects {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(t)
}
