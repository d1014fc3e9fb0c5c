//! Fixed-size vector helpers used by the path kernels.

pub type Vector<const M: usize> = [f64; M];
pub type Matrix<const M: usize> = [[f64; M]; M];

#[inline]
pub fn dot<const M: usize>(a: &Vector<M>, b: &Vector<M>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm<const M: usize>(a: &Vector<M>) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn matvec<const M: usize>(a: &Matrix<M>, v: &Vector<M>) -> Vector<M> {
    std::array::from_fn(|i| dot(&a[i], v))
}

#[inline]
pub fn sub<const M: usize>(a: &Vector<M>, b: &Vector<M>) -> Vector<M> {
    std::array::from_fn(|i| a[i] - b[i])
}

#[inline]
pub fn add<const M: usize>(a: &Vector<M>, b: &Vector<M>) -> Vector<M> {
    std::array::from_fn(|i| a[i] + b[i])
}

#[inline]
pub fn all_finite<const M: usize>(a: &Vector<M>) -> bool {
    a.iter().all(|x| x.is_finite())
}
