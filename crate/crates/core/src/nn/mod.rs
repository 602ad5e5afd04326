//! Minimal CPU tensor engine: NCHW f32 tensors, a recording graph with
//! reverse-mode gradients, parameter storage and Adam.

mod graph;
pub mod kernels;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{BnUpdate, Gradients, Graph, Mode, NodeId};
pub use kernels::{ConvGeom, Mat};
pub use layers::{BatchNorm2d, Conv2d, ConvBn, ConvTranspose2x2, BN_EPS, BN_MOMENTUM};
pub use optim::{Adam, AdamConfig, ScalarAdam};
pub use params::{BufferId, Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks input and parameter gradients of `f` against central
    /// differences of the scalar `sum(weights * f(x))`.
    fn check(
        store: &mut ParamStore,
        x: Tensor,
        mode: Mode,
        f: &dyn Fn(&mut Graph, NodeId) -> NodeId,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eval = |store: &ParamStore, x: &Tensor, weights: Option<&Tensor>| -> (f64, Tensor) {
            let mut g = Graph::new(store, mode);
            let xi = g.variable(x.clone());
            let y = f(&mut g, xi);
            let out = g.value(y).clone();
            let s = weights.map_or(0.0, |w| out.data().iter().zip(w.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum());
            (s, out)
        };
        let (_, out) = eval(store, &x, None);
        let weights = random(out.shape(), &mut rng);

        let mut g = Graph::new(store, mode);
        let xi = g.variable(x.clone());
        let y = f(&mut g, xi);
        let grads = g.backward(vec![(y, weights.clone())]);
        let gx = grads.leaf(xi).unwrap().clone();
        let pgrads = grads.into_params();

        let h = 1e-2f32;
        let tol = |a: f64, b: f64| (a - b).abs() <= 2e-2 * a.abs().max(b.abs()).max(1e-1);
        for i in (0..x.len()).step_by((x.len() / 12).max(1)) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(store, &xp, Some(&weights)).0 - eval(store, &xm, Some(&weights)).0) / (2.0 * h as f64);
            assert!(tol(fd, gx.data()[i] as f64), "input {i}: fd {fd} vs {}", gx.data()[i]);
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let n = store.param(id).value.len();
            for k in (0..n).step_by((n / 6).max(1)) {
                let orig = store.value(id)[k];
                store.value_mut(id)[k] = orig + h;
                let fp = eval(store, &x, Some(&weights)).0;
                store.value_mut(id)[k] = orig - h;
                let fm = eval(store, &x, Some(&weights)).0;
                store.value_mut(id)[k] = orig;
                let fd = (fp - fm) / (2.0 * h as f64);
                let an = pgrads[id.0].as_ref().map_or(0.0, |g| g[k] as f64);
                assert!(tol(fd, an), "{} [{k}]: fd {fd} vs {an}", store.param(id).name);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for geom in [ConvGeom::new(3, 1, 1, 1), ConvGeom::new(3, 2, 1, 1), ConvGeom::new(3, 1, 2, 2), ConvGeom::new(1, 1, 0, 1), ConvGeom::new(4, 2, 1, 1)] {
            let mut store = ParamStore::new(3);
            let conv = Conv2d::new(&mut store, "c", 2, 3, geom, true, Init::HE);
            check(&mut store, random([2, 2, 6, 5], &mut rng), Mode::Train, &|g, x| g.conv2d(x, &conv));
        }
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new(3);
        let up = ConvTranspose2x2::new(&mut store, "u", 3, 2);
        check(&mut store, random([2, 3, 3, 4], &mut rng), Mode::Train, &|g, x| g.conv_transpose2x2(x, &up));
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(3);
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        store.value_mut(bn.gamma).copy_from_slice(&[0.5, 1.5, -1.0]);
        store.value_mut(bn.beta).copy_from_slice(&[0.1, 0.0, 0.3]);
        check(&mut store, random([2, 3, 3, 3], &mut rng), Mode::Train, &|g, x| g.batch_norm(x, &bn));
        store.buffer_mut(bn.running_mean).copy_from_slice(&[0.1, -0.2, 0.3]);
        store.buffer_mut(bn.running_var).copy_from_slice(&[0.5, 2.0, 1.0]);
        check(&mut store, random([2, 3, 3, 3], &mut rng), Mode::Eval, &|g, x| g.batch_norm(x, &bn));
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new(3);
        check(&mut store, random([2, 2, 5, 5], &mut rng), Mode::Train, &|g, x| g.relu(x));
        check(&mut store, random([2, 2, 5, 5], &mut rng), Mode::Train, &|g, x| g.leaky_relu(x, 0.2));
        check(&mut store, random([2, 2, 6, 7], &mut rng), Mode::Train, &|g, x| g.max_pool(x));
        check(&mut store, random([1, 2, 4, 4], &mut rng), Mode::Train, &|g, x| {
            let r = g.relu(x);
            let c = g.concat(&[x, r, x]);
            let d = g.add(x, r);
            let d = g.concat(&[d, c]);
            g.add(d, d)
        });
        let up = Rc::new(Mat::bilinear(3, 7));
        let pool = Rc::new(Mat::adaptive_avg(5, 2));
        check(&mut store, random([2, 2, 3, 5], &mut rng), Mode::Train, &|g, x| g.resample(x, up.clone(), pool.clone()));
    }

    #[test]
    fn running_statistics_follow_batches() {
        let mut store = ParamStore::new(0);
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        let x = Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new(&store, Mode::Train);
        let xi = g.input(x);
        g.batch_norm(xi, &bn);
        let ups = g.take_bn_updates();
        store.apply_bn_updates(&ups);
        assert!((store.buffer(bn.running_mean)[0] - 0.25).abs() < 1e-6);
        // unbiased variance 5/3
        assert!((store.buffer(bn.running_var)[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn shape_only_store_counts_without_allocating() {
        let mut store = ParamStore::shape_only();
        let conv = Conv2d::new(&mut store, "c", 1, 1, ConvGeom::new(3, 1, 1, 1), true, Init::HE);
        assert_eq!(store.count(), 10);
        assert!(store.value(conv.weight).is_empty());
        store.scope("enc", |s| ConvBn::new(s, "b", 4, 8, ConvGeom::new(1, 1, 0, 1)));
        assert_eq!(store.count_prefix("enc"), 32 + 16);
    }
}
