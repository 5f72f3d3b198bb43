//! Level-set densities, stochastic complexity along a regularization path, and the
//! Jacobian-selection bias diagnostic.

mod bias;
mod complexity;
mod density;
mod path;
pub mod quadrature;

pub use bias::{bias_diagnostic, write_bias_csv, BiasEstimate, JacobianPolicy, SjoPolicy};
pub use complexity::{
    asymptotic_slope_check, complexity_record, gaussian_nll, log_complexity_chart, log_complexity_linear, slope_study,
    stochastic_complexity_local, weighted_line, ComplexityConfig, ComplexityMode, ComplexityRecord, OuterIntegral,
    OuterRegion, SlopeFit, SlopeStudy, SlopeStudyConfig, SlopeStudyRow,
};
pub use density::{
    affine_density_parts, affine_structure, gaussian_kernel, inner_density_ambient_is, inner_density_ambient_is_extrapolated,
    inner_density_analytic_affine, inner_density_mcmc_bridge, inner_density_thickened, AffineDensity, BridgeReference,
    DensityEstimate, DensityMethod, EstimateStatus, IsProposal,
};
pub use path::{
    cv_errors, fit_path, lambda_grid, prediction_mse, run_path, ChainCheck, PathConfig, PathResult, PathRow, Selection,
    CRITERIA,
};
