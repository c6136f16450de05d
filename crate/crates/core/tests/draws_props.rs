use mixrrm::draws::DrawSet;
use proptest::prelude::*;

proptest! {
    #[test]
    fn uniforms_stay_inside_the_unit_interval(
        n in 1usize..40,
        dims in 1usize..6,
        nrep in 1usize..60,
        burn in 0usize..100,
    ) {
        let set = DrawSet::halton(n, dims, nrep, burn).unwrap();
        for i in 0..n {
            for k in 0..dims {
                for r in 0..nrep {
                    let u = set.uniform(i, k, r);
                    prop_assert!(u > 0.0 && u < 1.0);
                    prop_assert!(set.normal(i, k, r).is_finite());
                }
            }
        }
    }
}
