from .robot import (Contact, DynamicsTerms, ModelError, RobotModel, SingularBaseBlock,
                    UnknownContactFrame, UnknownLink, bias_forces, bundled_models,
                    centroidal_momentum_matrix, contact_jacobian, gravity_vector,
                    inverse_dynamics, jdot_qdot, load_model, mass_matrix)

__all__ = ["Contact", "DynamicsTerms", "ModelError", "RobotModel", "SingularBaseBlock",
           "UnknownContactFrame", "UnknownLink", "bias_forces", "bundled_models",
           "centroidal_momentum_matrix", "contact_jacobian", "gravity_vector",
           "inverse_dynamics", "jdot_qdot", "load_model", "mass_matrix"]
