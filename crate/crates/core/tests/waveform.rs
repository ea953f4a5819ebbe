use ionswap::filter::FilterModel;
use ionswap::optimize::{nelder_mead, NelderMeadOptions};
use ionswap::trap::Channel;
use ionswap::waveform::{sample_count, swap_schedule, SwapRampParams};
use proptest::prelude::*;

fn params(u_d_peak: f64, duration: f64) -> SwapRampParams {
    SwapRampParams {
        u_d_peak,
        duration,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn filter_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, p in 0.1f64..2.0, q in 0.1f64..2.0, t in 0.0f64..60.0) {
        let s1 = swap_schedule(&params(p, 22.0), 20).unwrap();
        let s2 = swap_schedule(&params(q, 22.0), 20).unwrap();
        let mix = s1.linear_combination(a, &s2, b).unwrap();
        let f = FilterModel::default();
        let (f1, f2, fm) = (f.apply(&s1), f.apply(&s2), f.apply(&mix));
        for c in mix.channels() {
            let want = a * f1.value(c, t) + b * f2.value(c, t);
            prop_assert!((fm.value(c, t) - want).abs() < 1e-9, "{} at {}", c, t);
        }
    }

    #[test]
    fn swap_diagonal_is_odd_in_time(u_d in 0.1f64..3.0, duration in 5.0f64..200.0) {
        let s = swap_schedule(&params(u_d, duration), 20).unwrap();
        let d = s.samples(Channel::Diagonal(20)).unwrap();
        let seg = s.samples(Channel::Segment(20)).unwrap();
        let n = d.len();
        prop_assert_eq!(n, sample_count(duration, s.sample_rate()));
        prop_assert!(d.iter().all(|v| v.abs() <= u_d + 1e-12));
        for i in 0..n {
            let t = s.sample_time(i) / duration;
            let j = ((1.0 - t) * duration * s.sample_rate()).round() as usize;
            if j < n && (s.sample_time(j) / duration - (1.0 - t)).abs() < 1e-9 {
                prop_assert!((d[i] + d[j]).abs() < 1e-9 * u_d);
                prop_assert!((seg[i] - seg[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn filtered_output_settles_to_last_sample(u_d in 0.1f64..3.0, duration in 5.0f64..100.0) {
        let s = swap_schedule(&params(u_d, duration), 20).unwrap();
        let f = FilterModel::default().apply(&s);
        let end = s.end_config();
        for c in s.channels() {
            prop_assert!((f.value(c, f.settled_end()) - end.get(c)).abs() <= 1e-4);
        }
    }

    #[test]
    fn optimizer_never_worse_than_start(x0 in -5.0f64..5.0, y0 in -5.0f64..5.0, cx in -3.0f64..3.0) {
        let f = |x: &[f64]| (x[0] - cx).powi(2) + 10.0 * (x[1] - x[0] * x[0]).powi(2).sin().abs();
        let opts = NelderMeadOptions { max_evaluations: 80, ..Default::default() };
        let start = [x0, y0];
        let m = nelder_mead(f, &start, &[(-6.0, 6.0), (-6.0, 6.0)], &[0.5, 0.5], &opts, None).unwrap();
        prop_assert!(m.objective <= f(&start));
        prop_assert!(m.point.iter().all(|v| (-6.0..=6.0).contains(v)));
    }
}
