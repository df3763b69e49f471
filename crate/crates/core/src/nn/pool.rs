use ndarray::{Array2, ArrayView2};

use super::Real;

/// 2x2 max pooling with stride 2 over a `[c, h * w]` map. Returns the pooled
/// `[c, (h / 2) * (w / 2)]` map and the winning input index per output.
pub fn max_pool2<T: Real>(x: ArrayView2<T>, h: usize, w: usize) -> (Array2<T>, Vec<u32>) {
    assert!(h.is_multiple_of(2) && w.is_multiple_of(2), "pooling needs even sides");
    let (oh, ow) = (h / 2, w / 2);
    let c = x.nrows();
    let mut y = Array2::zeros((c, oh * ow));
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let row = x.row(ch);
        for i in 0..oh {
            for j in 0..ow {
                let mut best = 2 * i * w + 2 * j;
                for cand in [best + 1, best + w, best + w + 1] {
                    if row[cand] > row[best] {
                        best = cand;
                    }
                }
                y[[ch, i * ow + j]] = row[best];
                arg[ch * oh * ow + i * ow + j] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward<T: Real>(dy: ArrayView2<T>, arg: &[u32], h: usize, w: usize) -> Array2<T> {
    let c = dy.nrows();
    let per = dy.ncols();
    let mut dx = Array2::zeros((c, h * w));
    for ch in 0..c {
        for k in 0..per {
            dx[[ch, arg[ch * per + k] as usize]] += dy[[ch, k]];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pools_and_routes_gradient_to_winner() {
        let x = array![[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0]];
        // 2 rows x 4 cols
        let (y, arg) = max_pool2(x.view(), 2, 4);
        assert_eq!(y, array![[5.0, 9.0]]);
        assert_eq!(arg, vec![1, 6]);
        let dx = max_pool2_backward(array![[1.0, -2.0]].view(), &arg, 2, 4);
        assert_eq!(dx, array![[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, -2.0, 0.0]]);
    }
}
